import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from diffsampler import Gaussian, GaussianOptimalPolicy, VPSchedule, simulate_controlled
from diffsampler.checkpoint import load_checkpoint, save_checkpoint
from diffsampler.config import TrainConfig
from diffsampler.errors import TrainingError
from diffsampler.evaluation import report, simulate_summary
from diffsampler.losses import path_functionals
from diffsampler.nn import flatten_params, init_params
from diffsampler.train import (adam_step, adam_update, clip_by_global_norm, clip_schedule, ema_decay, ema_update,
                               ema_window, fires_ema, init_state, n_steps_at, train)

GAUSS = "gauss:d=2,nu=1,m=0"


def _tiny(**kw):
    base = dict(target="gmm", batch_size=8, gradient_steps=6, steps_schedule=((4, 0.5), (6, 0.5)), width=8,
                phi2_width=8)
    base.update(kw)
    return TrainConfig(**base)


def test_first_adam_step_is_signed_lr():
    p = {"a": jnp.array([1.0, -2.0, 0.5])}
    g = {"a": jnp.array([0.3, -4.0, 1e-3])}
    new, _, _ = adam_update(p, g, {"a": jnp.zeros(3)}, {"a": jnp.zeros(3)}, 1, 0.005, 0.0)
    delta = np.asarray(new["a"] - p["a"])
    np.testing.assert_allclose(delta, -0.005 * np.sign(np.asarray(g["a"])), rtol=1e-4)


def test_zero_gradient_leaves_parameters():
    st = init_state({"a": jnp.array([1.0, 2.0])})
    st = adam_step(st, {"a": jnp.zeros(2)}, 0.005, 0.0)
    np.testing.assert_array_equal(np.asarray(st.params["a"]), [1.0, 2.0])


def test_global_norm_clipping():
    g = {"a": jnp.array([6.0, 8.0])}
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert float(norm) == pytest.approx(10.0)
    np.testing.assert_allclose(np.asarray(clipped["a"]), [0.6, 0.8], rtol=1e-15)
    small, _ = clip_by_global_norm({"a": jnp.array([0.3])}, 1.0)
    assert float(small["a"][0]) == 0.3


def test_non_finite_gradient_aborts():
    with pytest.raises(TrainingError):
        adam_step(init_state({"a": jnp.ones(2)}), {"a": jnp.array([np.nan, 0.0])}, 0.005, 0.0)


def test_clip_schedule_default_steps():
    cfg = TrainConfig()
    assert cfg.total_steps == 20000
    assert clip_schedule(100, cfg) == 10
    assert clip_schedule(200, cfg) == 10
    assert clip_schedule(300, cfg) == 250
    assert clip_schedule(5000, cfg) == 500


def test_clip_schedule_scales_with_K():
    cfg = TrainConfig(gradient_steps=2000)
    assert clip_schedule(20, cfg) == 10
    assert clip_schedule(21, cfg) == 250
    assert clip_schedule(41, cfg) == 500
    fixed = TrainConfig(gradient_steps=2000, scale_schedules=False)
    assert clip_schedule(100, fixed) == 10


def test_ema_decay_examples():
    assert ema_decay(0) == 0.0
    assert ema_decay(9) == pytest.approx(10 / 11, abs=1e-15)


def test_ema_first_update_copies_and_fixed_point():
    st = init_state({"a": jnp.array([1.5, -2.0])})
    st = ema_update(st)
    np.testing.assert_array_equal(np.asarray(st.ema_params["a"]), [1.5, -2.0])
    for _ in range(20):
        st = ema_update(st)
    np.testing.assert_array_equal(np.asarray(st.ema_params["a"]), [1.5, -2.0])


def test_ema_update_count():
    cfg = TrainConfig()
    assert sum(fires_ema(k, cfg) for k in range(cfg.total_steps)) == 300
    small = TrainConfig(gradient_steps=2000)
    assert ema_window(small) == 150
    assert sum(fires_ema(k, small) for k in range(2000)) == 30


def test_steps_schedule_quarters():
    cfg = TrainConfig(gradient_steps=8)
    assert [n_steps_at(k, cfg) for k in range(8)] == [100, 100, 200, 200, 400, 400, 800, 800]


def test_zero_steps_returns_initialization():
    cfg = _tiny(gradient_steps=0)
    ckpt = train(cfg, progress=False)
    init = flatten_params(init_params(cfg.net(), cfg.dim, cfg.seed))
    for k, v in flatten_params(ckpt.params).items():
        np.testing.assert_array_equal(np.asarray(v), np.asarray(init[k]))
    for k, v in flatten_params(ckpt.ema_params).items():
        np.testing.assert_array_equal(np.asarray(v), np.asarray(init[k]))


def test_training_is_deterministic(tmp_path):
    cfg = _tiny()
    a = train(cfg, log_path=tmp_path / "a.csv", progress=False)
    b = train(cfg, log_path=tmp_path / "b.csv", progress=False)
    fa, fb = flatten_params(a.params), flatten_params(b.params)
    assert all(np.array_equal(np.asarray(fa[k]), np.asarray(fb[k])) for k in fa)
    la = (tmp_path / "a.csv").read_text().splitlines()
    lb = (tmp_path / "b.csv").read_text().splitlines()
    assert la[0] == "step,loss,grad_norm,n_steps,seconds"
    assert [r.rsplit(",", 1)[0] for r in la] == [r.rsplit(",", 1)[0] for r in lb]
    assert len(la) == 1 + cfg.total_steps
    c = train(cfg.replace(seed=1), progress=False)
    assert not np.array_equal(np.asarray(flatten_params(c.params)["phi1/out/w"]), np.asarray(fa["phi1/out/w"]))


def test_training_moves_parameters_and_keeps_ema():
    cfg = _tiny(gradient_steps=10)
    ckpt = train(cfg, progress=False)
    assert not np.array_equal(np.asarray(flatten_params(ckpt.params)["phi1/out/w"]), 0.0)
    assert ckpt.has_ema
    assert [h[3] for h in ckpt.history] == [4] * 5 + [6] * 5


def test_checkpoint_round_trip(tmp_path):
    cfg = _tiny(target=GAUSS)
    ckpt = train(cfg, progress=False)
    path = tmp_path / "c.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.config == cfg
    assert back.step == ckpt.step
    for tree_a, tree_b in ((ckpt.params, back.params), (ckpt.ema_params, back.ema_params)):
        fa, fb = flatten_params(tree_a), flatten_params(tree_b)
        assert all(np.array_equal(np.asarray(fa[k]), np.asarray(fb[k])) for k in fa)
    ra = report(ckpt.policy(), cfg.target_density(), 20, 256, 3)
    rb = report(back.policy(), cfg.target_density(), 20, 256, 3)
    assert ra.row()[:-1] == rb.row()[:-1]


@pytest.fixture(scope="module")
def gaussian_desk_run():
    # Initial and final policies scored on one shared-noise batch (work has the same mean as the DIS loss).
    cfg = TrainConfig(target=GAUSS, batch_size=256, gradient_steps=500, steps_schedule=((100, 1.0),), width=32)
    ckpt = train(cfg, progress=False)
    target, process = cfg.target_density(), cfg.process()
    init = ckpt.policy(use_ema=False).with_params(init_params(cfg.net(), cfg.dim, cfg.seed))
    w0 = np.asarray(simulate_summary(init, target, process, 8192, 100, seed=11).work)
    w1 = np.asarray(simulate_summary(ckpt.policy(use_ema=False), target, process, 8192, 100, seed=11).work)
    return w0, w1


@pytest.mark.slow
def test_gaussian_desk_training_does_not_degrade(gaussian_desk_run):
    w0, w1 = gaussian_desk_run
    diff = w1 - w0
    assert diff.mean() <= 3 * diff.std(ddof=1) / math.sqrt(diff.size)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="Euler-Maruyama bias puts the optimal policy's loss at 0.091 for N=100, d=2 "
                   "(see test_optimal_policy_loss_at_100_steps and the decisions ledger)")
def test_gaussian_desk_training_final_loss(gaussian_desk_run):
    assert gaussian_desk_run[1].mean() <= 0.05


def test_optimal_policy_loss_at_100_steps():
    # The exact control's loss is its EM discretization bias, which already exceeds 0.05 at N=100.
    s = VPSchedule(2)
    b = simulate_controlled(s, GaussianOptimalPolicy(s, 0.0, 1.0), 8192, 100, seed=0, record=False)
    w = np.asarray(path_functionals(b, Gaussian(2)).work)
    assert w.mean() - 3 * w.std(ddof=1) / math.sqrt(w.size) > 0.05
