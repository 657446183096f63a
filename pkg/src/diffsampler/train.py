"""Gradient training of the control: simulate, differentiate the loss, Adam step, EMA."""

from __future__ import annotations

import csv
import math
import sys
import time
from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .checkpoint import Checkpoint
from .config import TrainConfig
from .errors import TrainingError
from .losses import LOSSES
from .nn import ControlPolicy, global_norm, init_params
from .sde import raise_if_bad, simulate_paths, trajectory_keys

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainState:
    params: dict
    adam_m: dict
    adam_v: dict
    step: int = 0
    ema_params: dict | None = None
    ema_step: int = 0


def init_state(params) -> TrainState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return TrainState(params, zeros, zeros)


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    scale = jnp.minimum(1.0, max_norm / jnp.maximum(norm, 1e-300))
    return jax.tree_util.tree_map(lambda g: g * scale, grads), norm


def adam_update(params, grads, m, v, count, lr, wd):
    """One Adam step with bias correction and decoupled weight decay (count is 1-based)."""
    tm = jax.tree_util.tree_map
    m = tm(lambda a, g: ADAM_B1 * a + (1 - ADAM_B1) * g, m, grads)
    v = tm(lambda a, g: ADAM_B2 * a + (1 - ADAM_B2) * g * g, v, grads)
    c1 = 1 - ADAM_B1**count
    c2 = 1 - ADAM_B2**count
    params = tm(lambda p, a, b: p - lr * ((a / c1) / (jnp.sqrt(b / c2) + ADAM_EPS) + wd * p), params, m, v)
    return params, m, v


def adam_step(state: TrainState, grads, lr, wd) -> TrainState:
    """Apply one Adam update to ``state`` (grads assumed already clipped)."""
    if not np.isfinite(float(global_norm(grads))):
        raise TrainingError(f"non-finite gradient at step {state.step}; update aborted")
    params, m, v = adam_update(state.params, grads, state.adam_m, state.adam_v, state.step + 1, lr, wd)
    return TrainState(params, m, v, state.step + 1, state.ema_params, state.ema_step)


def ema_decay(ema_step: int) -> float:
    return 1.0 - 1.0 / (1.0 + ema_step / 0.9)


def ema_update(state: TrainState) -> TrainState:
    """theta_bar <- decay * theta_bar + (1 - decay) * theta; the first update copies theta."""
    d = ema_decay(state.ema_step)
    if state.ema_params is None:
        ema = state.params
    else:
        ema = jax.tree_util.tree_map(lambda e, p: d * e + (1 - d) * p, state.ema_params, state.params)
    return TrainState(state.params, state.adam_m, state.adam_v, state.step, ema, state.ema_step + 1)


def clip_schedule(k: int, cfg: TrainConfig | None = None) -> float:
    """Output clip bound at step k: 10 up to step 200, 250 up to 400, then 500.

    The phase boundaries scale with K / K_default when ``cfg.scale_schedules``.
    """
    cfg = cfg or TrainConfig()
    scale = cfg.schedule_scale
    b1, b2 = (round(s * scale) for s in cfg.clip_steps)
    c1, c2, c3 = cfg.clip_values
    if k <= b1:
        return c1
    if k <= b2:
        return c2
    return c3


def ema_window(cfg: TrainConfig) -> int:
    return min(cfg.total_steps, max(1, round(cfg.ema_window * cfg.schedule_scale)))


def fires_ema(k: int, cfg: TrainConfig) -> bool:
    """Whether the EMA updates after gradient step k (0-based)."""
    start = cfg.total_steps - ema_window(cfg)
    return k >= start and (k - start) % cfg.ema_every == 0


def n_steps_at(k: int, cfg: TrainConfig) -> int:
    """Euler-Maruyama step count used at gradient step k."""
    K = cfg.total_steps
    acc = 0.0
    for n, frac in cfg.steps_schedule:
        acc += frac
        if k < round(acc * K):
            return n
    return cfg.steps_schedule[-1][0]


def _dtype(cfg):
    return jnp.float64 if cfg.precision == "float64" else jnp.float32


def make_loss_fn(cfg: TrainConfig, n_steps: int):
    """loss(params, key, clip_c) -> (loss, bad_step) for one batch of fresh trajectories."""
    target = cfg.target_density()
    process = cfg.process()
    net = cfg.net()
    loss = LOSSES[cfg.loss]
    dtype = _dtype(cfg)

    def loss_fn(params, key, clip_c):
        policy = ControlPolicy(params, target, process, net, clip_c, cfg.detach_score)
        prior_keys, noise_keys = trajectory_keys(key, cfg.batch_size)
        x0 = process.sample_prior(prior_keys, dtype)
        cost_policy = policy if cfg.loss == "logvar" else None
        batch, bad = simulate_paths(process, policy, x0, n_steps, noise_keys=noise_keys,
                                    cost_policy=cost_policy)
        if cfg.loss in ("dis", "pis"):
            value = loss(batch, target, add_stochastic_integral=cfg.add_stochastic_integral)
        else:
            value = loss(batch, target)
        return value, bad

    return loss_fn


@partial(jax.jit, static_argnums=(0, 1))
def _train_step(cfg, n_steps, params, m, v, count, key, clip_c):
    loss_fn = make_loss_fn(cfg, n_steps)
    (value, bad), grads = jax.value_and_grad(loss_fn, has_aux=True)(params, key, clip_c)
    grads, gnorm = clip_by_global_norm(grads, cfg.grad_clip)
    new_params, m, v = adam_update(params, grads, m, v, count, cfg.lr, cfg.weight_decay)
    return new_params, m, v, value, gnorm, bad


def step_key(seed: int, k: int):
    return jax.random.fold_in(jax.random.PRNGKey(seed), k)


def train(cfg: TrainConfig, log_path=None, progress=True, log_every=100, init=None,
          callback=None) -> Checkpoint:
    """Run cfg.total_steps gradient steps and return a checkpoint holding theta and its EMA.

    ``init`` optionally supplies starting parameters (defaults to the
    seeded initialization). Writes a CSV training log when ``log_path`` is
    given and progress lines to stderr when ``progress``. ``callback(k, state)``
    runs after every step.
    """
    K = cfg.total_steps
    dtype = _dtype(cfg)
    params = init if init is not None else init_params(cfg.net(), cfg.dim, cfg.seed, dtype)
    state = init_state(params)
    log_file = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_file) if log_file else None
    if writer:
        writer.writerow(["step", "loss", "grad_norm", "n_steps", "seconds"])
    history = []
    t0 = time.perf_counter()
    try:
        for k in range(K):
            n = n_steps_at(k, cfg)
            c = clip_schedule(k, cfg)
            new_params, m, v, value, gnorm, bad = _train_step(
                cfg, n, state.params, state.adam_m, state.adam_v, k + 1, step_key(cfg.seed, k),
                jnp.asarray(c, dtype))
            value, gnorm = float(value), float(gnorm)
            try:
                raise_if_bad(bad)
            except Exception as exc:
                raise TrainingError(f"step {k}: {exc}") from exc
            if not (math.isfinite(value) and math.isfinite(gnorm)):
                raise TrainingError(f"step {k}: non-finite loss ({value}) or gradient norm ({gnorm}); "
                                    "update aborted")
            state = TrainState(new_params, m, v, k + 1, state.ema_params, state.ema_step)
            if fires_ema(k, cfg):
                state = ema_update(state)
            if callback is not None:
                callback(k, state)
            elapsed = time.perf_counter() - t0
            history.append((k, value, gnorm, n, elapsed))
            if writer:
                writer.writerow([k, f"{value:.17g}", f"{gnorm:.17g}", n, f"{elapsed:.3f}"])
            if progress and (k % log_every == 0 or k == K - 1):
                print(f"[train {cfg.loss} {cfg.target}] step {k}/{K} loss {value:.5f} "
                      f"|g| {gnorm:.3g} N={n} clip={c:g} {elapsed:.1f}s", file=sys.stderr)
    finally:
        if log_file:
            log_file.close()
    ema = state.ema_params if state.ema_params is not None else state.params
    ckpt = Checkpoint(state.params, ema, K, cfg)
    ckpt.history = history
    return ckpt
