"""Fast invariant checks run by ``diffsampler selftest``.

Each check returns (ok, detail). They are small versions of the test suite
meant to confirm an installation works, not to replace it.
"""

from __future__ import annotations

import math

import jax
import jax.numpy as jnp
import numpy as np

from .evaluation import importance_from_log_weights, simulate_summary
from .losses import dds_loss, dis_loss, logvar_loss, path_functionals
from .nn import NetConfig, flatten_params, init_params, init_policy, unflatten_params
from .sde import (GaussianOptimalPolicy, VPSchedule, simulate_controlled, simulate_inference,
                  vp_transition)
from .targets import GMM, DoubleWell, Funnel, Gaussian, Shifted


def check_target_gradients():
    rng = np.random.default_rng(0)
    worst = 0.0
    for t in (GMM(), Funnel(dim=5), DoubleWell(dim=3, w=2, delta=3.0), Gaussian(dim=3, mean=1.0, nu=2.0)):
        x = rng.normal(size=(10, t.dim))
        g = np.asarray(t.grad_log_rho(x))
        h = 1e-5
        for j in range(t.dim):
            e = np.zeros(t.dim)
            e[j] = h
            fd = (np.asarray(t.log_rho(x + e)) - np.asarray(t.log_rho(x - e))) / (2 * h)
            worst = max(worst, float(np.max(np.abs(fd - g[:, j]) / np.maximum(1.0, np.abs(g[:, j])))))
    return worst < 1e-6, f"max relative error {worst:.2e}"


def check_analytic_control():
    s = VPSchedule(1)
    summ = simulate_summary(GaussianOptimalPolicy(s, (0.0,), 1.0), Gaussian(dim=1), s, 1024, 200, seed=0)
    logz, se, ess = importance_from_log_weights(-summ.work)
    return abs(logz) < 0.05 and ess > 0.5 * 1024, f"logz_is {logz:.4f}, ESS/M {ess / 1024:.3f}"


def _random_policy(target, s, seed=1):
    params = init_params(NetConfig(width=16, phi2_width=16), target.dim, seed)
    # The output layer starts at zero; perturb everything so the control is nontrivial.
    flat = flatten_params(params)
    key = jax.random.PRNGKey(seed)
    for i, name in enumerate(sorted(flat)):
        flat[name] = flat[name] + 0.1 * jax.random.normal(jax.random.fold_in(key, i), flat[name].shape)
    policy = init_policy(NetConfig(width=16, phi2_width=16), target, s, seed)
    return policy.with_params(unflatten_params(flat))


def check_shift_invariance():
    target = GMM()
    s = VPSchedule(2)
    policy = _random_policy(target, s)
    batch = simulate_controlled(s, policy, 256, 20, seed=3)
    log_c = 1.7
    shifted = Shifted(target, log_c)
    d_dis = float(dis_loss(batch, shifted) - dis_loss(batch, target))
    d_dds = float(dds_loss(batch, shifted) - dds_loss(batch, target))
    d_var = float(logvar_loss(batch, shifted) - logvar_loss(batch, target))
    ok = abs(d_dis + log_c) < 1e-9 and abs(d_dds + log_c) < 1e-9 and abs(d_var) < 1e-9
    return ok, f"dis shift {d_dis:+.6f}, dds shift {d_dds:+.6f}, logvar change {d_var:.1e}"


def check_dds_equals_dis():
    target = GMM()
    s = VPSchedule(2)
    policy = _random_policy(target, s)
    # The identity is exact in continuous time; Euler-Maruyama adds an O(1/N) gap.
    batch = simulate_controlled(s, policy, 2048, 400, seed=4, record=False)
    pf = path_functionals(batch, target)
    a = np.asarray(pf.running_cost + pf.log_prior - pf.log_target)
    xT = batch.x_final
    b = np.asarray(batch.dds_cost - 0.5 * jnp.sum(xT**2, -1) - math.log(2 * math.pi) - pf.log_target)
    diff = a.mean() - b.mean()
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    return abs(diff) <= 3 * se + 5e-3, f"difference {diff:+.4f}, pooled stderr {se:.4f}"


def check_ou_transition():
    s = VPSchedule(1)
    M = 8192
    y0 = jnp.full((M, 1), 2.0)
    yT = np.asarray(simulate_inference(s, y0, 400, jax.random.PRNGKey(5)))[:, 0]
    mean, var = vp_transition(s, 2.0, s.T)
    se_mean = math.sqrt(float(var) / M)
    ok_mean = abs(yT.mean() - float(mean)) <= 4 * se_mean + 2e-2 * abs(float(mean)) + 1e-3
    se_var = float(var) * math.sqrt(2.0 / (M - 1))
    ok_var = abs(yT.var(ddof=1) - float(var)) <= 4 * se_var + 2e-2 * float(var)
    return ok_mean and ok_var, f"mean {yT.mean():.4f} vs {float(mean):.4f}, var {yT.var(ddof=1):.4f} vs {float(var):.4f}"


def check_stochastic_integral():
    target = GMM()
    s = VPSchedule(2)
    batch = simulate_controlled(s, _random_policy(target, s), 2048, 50, seed=6, record=False)
    si = np.asarray(batch.stoch_int)
    se = si.std(ddof=1) / math.sqrt(si.size)
    return abs(si.mean()) <= 4 * se, f"mean {si.mean():+.4f}, stderr {se:.4f}"


CHECKS = {
    "target gradients": check_target_gradients,
    "analytic control": check_analytic_control,
    "shift invariance": check_shift_invariance,
    "dds equals dis": check_dds_equals_dis,
    "ou transition": check_ou_transition,
    "stochastic integral": check_stochastic_integral,
}


def run(out=print):
    """Run every check; returns True when all pass."""
    all_ok = True
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # report and continue
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
