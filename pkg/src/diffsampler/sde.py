"""Noise schedules and Euler-Maruyama simulation of the controlled generative SDE.

The generative process runs forward in "generative time" s in [0, T] and
evaluates every inference-time coefficient at T - s:

    X_{n+1} = X_n + (sigma(T - t_n) u(X_n, T - t_n) - f(X_n, T - t_n)) dt + sigma(T - t_n) dB_n

Running cost, stochastic integral and state updates all use left-point
evaluation on the uniform grid t_n = n T / N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from scipy.stats import chi2

from .errors import DomainError, InputError, SimulationError

LOG_2PI = math.log(2.0 * math.pi)
PRIOR_MASS = 0.9999


def is_traced(x) -> bool:
    return isinstance(x, jax.core.Tracer)


def _check_time(t, T):
    if is_traced(t):
        return
    t_arr = np.asarray(t)
    if np.any(t_arr < -1e-12 * T) or np.any(t_arr > T * (1 + 1e-12)):
        raise InputError(f"time {t!r} outside [0, {T}]")


@dataclass(frozen=True)
class VPSchedule:
    """Variance-preserving OU inference process with a linear beta schedule.

    beta(t) = ((1 - t/T) sigma_min + (t/T) sigma_max) / 2, f(x, t) = -beta(t) x,
    sigma(t) = eta sqrt(2 beta(t)).
    """

    dim: int
    sigma_min: float = 0.1
    sigma_max: float = 10.0
    T: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise InputError("need 0 < sigma_min < sigma_max")
        if self.T <= 0 or self.eta <= 0 or self.dim < 1:
            raise InputError("T, eta and dim must be positive")

    starts_at_origin = False

    def beta(self, t):
        r = t / self.T
        return 0.5 * ((1 - r) * self.sigma_min + r * self.sigma_max)

    def alpha(self, t):
        return 0.5 * (self.sigma_min * t + (self.sigma_max - self.sigma_min) * t**2 / (2 * self.T))

    def sigma(self, t):
        return self.eta * jnp.sqrt(2.0 * self.beta(t))

    def f(self, x, t):
        return -self.beta(t) * x

    def div_f(self, t):
        return -self.dim * self.beta(t)

    def prior_score(self, x):
        return -x / self.eta**2

    def log_prior(self, x0):
        """Untruncated N(0, eta^2 I) log-density; the truncation removes 1e-4 of mass."""
        return -0.5 * jnp.sum(x0**2, axis=-1) / self.eta**2 - 0.5 * self.dim * (LOG_2PI + 2 * math.log(self.eta))

    def log_terminal_reference(self, xT):
        return jnp.zeros(xT.shape[:-1], dtype=xT.dtype)

    def sample_prior(self, keys, dtype=jnp.float64):
        return truncated_normal(keys, self.dim, self.eta, dtype)


@dataclass(frozen=True)
class BrownianReference:
    """Scaled Brownian motion from the origin: the half-bridge (PIS) reference process."""

    dim: int
    sigma_const: float = math.sqrt(0.2)
    T: float = 5.0

    starts_at_origin = True

    def __post_init__(self):
        if self.T <= 0 or self.sigma_const <= 0 or self.dim < 1:
            raise InputError("T, sigma and dim must be positive")

    def sigma(self, t):
        return self.sigma_const + 0.0 * t

    def f(self, x, t):
        return jnp.zeros_like(x)

    def div_f(self, t):
        return 0.0 * t

    def prior_score(self, x):
        raise DomainError("the Dirac start has no score")

    def log_prior(self, x0):
        return jnp.zeros(x0.shape[:-1], dtype=x0.dtype)

    def log_terminal_reference(self, xT):
        var = self.sigma_const**2 * self.T
        return -0.5 * jnp.sum(xT**2, axis=-1) / var - 0.5 * self.dim * (LOG_2PI + math.log(var))

    def sample_prior(self, keys, dtype=jnp.float64):
        return jnp.zeros((keys.shape[0], self.dim), dtype=dtype)


def schedule_coeffs(s: VPSchedule, t):
    """Return (beta, alpha, sigma) at inference time t."""
    _check_time(t, s.T)
    return s.beta(t), s.alpha(t), s.sigma(t)


def drift_f(s: VPSchedule, x, t):
    _check_time(t, s.T)
    return s.f(jnp.asarray(x), t)


def div_f(s: VPSchedule, t):
    _check_time(t, s.T)
    return s.div_f(t)


def vp_transition(s: VPSchedule, y0, t):
    """Mean and (isotropic) variance of Y_t given Y_0 = y0."""
    _check_time(t, s.T)
    a = s.alpha(t)
    return jnp.exp(-a) * jnp.asarray(y0), s.eta**2 * (1.0 - jnp.exp(-2.0 * a))


def analytic_optimal_control_gaussian(s: VPSchedule, m, nu, x, t_rev):
    """Optimal control sigma(T - t_rev) * grad log p_Y(x, T - t_rev) for the target N(m, nu^2 I)."""
    _check_time(t_rev, s.T)
    t = s.T - t_rev
    a = s.alpha(t)
    denom = s.eta**2 + jnp.exp(-2.0 * a) * (nu**2 - s.eta**2)
    if not is_traced(denom) and np.any(np.asarray(denom) <= 0):
        raise DomainError("transported variance is not positive")
    score = (jnp.exp(-a) * jnp.asarray(m) - x) / denom
    return s.sigma(t) * score


def analytic_optimal_drift_gaussian(s: VPSchedule, m, nu, x, t_rev):
    """Exact generative drift sigma u* - f at generative time t_rev for the target N(m, nu^2 I)."""
    t = s.T - t_rev
    u = analytic_optimal_control_gaussian(s, m, nu, x, t_rev)
    return s.sigma(t) * u - s.f(x, t)


@partial(jax.tree_util.register_dataclass, data_fields=[], meta_fields=["schedule", "mean", "nu"])
@dataclass(frozen=True)
class GaussianOptimalPolicy:
    """Policy callable (x, t) -> u*(x, t) with t in inference time."""

    schedule: VPSchedule
    mean: float | tuple = 0.0
    nu: float = 1.0

    def __call__(self, x, t):
        s = self.schedule
        a = s.alpha(t)
        denom = s.eta**2 + jnp.exp(-2.0 * a) * (self.nu**2 - s.eta**2)
        return s.sigma(t) * (jnp.exp(-a) * jnp.asarray(self.mean, x.dtype) - x) / denom


@partial(jax.tree_util.register_dataclass, data_fields=[], meta_fields=[])
@dataclass(frozen=True)
class ZeroPolicy:
    def __call__(self, x, t):
        return jnp.zeros_like(x)


def prior_radius(dim: int, scale: float = 1.0) -> float:
    """Radius of the ball holding PRIOR_MASS of N(0, scale^2 I_dim)."""
    return scale * math.sqrt(chi2.ppf(PRIOR_MASS, dim))


def truncated_normal(keys, dim, scale=1.0, dtype=jnp.float64):
    """One draw of N(0, scale^2 I) conditioned on the PRIOR_MASS ball per key, by rejection."""
    r2 = prior_radius(dim, scale) ** 2

    def one(key):
        def cond(state):
            return jnp.sum(state[1] ** 2) > r2

        def body(state):
            k, _ = state
            k, sub = jax.random.split(k)
            return k, scale * jax.random.normal(sub, (dim,), dtype)

        k, sub = jax.random.split(key)
        x = scale * jax.random.normal(sub, (dim,), dtype)
        return jax.lax.while_loop(cond, body, (k, x))[1]

    return jax.vmap(one)(keys)


def trajectory_keys(key, M: int, offset: int = 0):
    """Per-trajectory substreams: trajectory i owns fold_in(key, offset + i).

    Prior draws use fold_in(., 0) and step n's Brownian increment uses
    fold_in(fold_in(., 1), n), so results do not depend on how the batch is
    partitioned.
    """
    idx = jnp.arange(offset, offset + M, dtype=jnp.uint32)
    traj = jax.vmap(jax.random.fold_in, (None, 0))(key, idx)
    prior = jax.vmap(jax.random.fold_in, (0, None))(traj, 0)
    noise = jax.vmap(jax.random.fold_in, (0, None))(traj, 1)
    return prior, noise


def _step_noise(noise_keys, n, dim, dt, dtype):
    keys = jax.vmap(jax.random.fold_in, (0, None))(noise_keys, n)
    return jnp.sqrt(dt) * jax.vmap(lambda k: jax.random.normal(k, (dim,), dtype))(keys)


def rollout(schedule, policy, x0, n_steps, noise_keys=None, noise=None, record=False,
            cost_policy=None):
    """Traceable Euler-Maruyama core.

    ``policy(x, t)`` drives the dynamics (t is inference time). When
    ``cost_policy`` is given, the states are treated as fixed (gradients
    stopped) and running cost and stochastic integral are evaluated for
    ``cost_policy`` under the change of measure from ``policy``:
    running increment div f + u.v - |u|^2/2 with v the (detached) dynamics
    control. Its value equals the on-policy running cost when both agree.

    Returns a dict with x_final, running_cost, stoch_int, dds_cost, bad_step and,
    if ``record``, states (M, N+1, d) and noise (M, N, d).
    """
    M, dim = x0.shape
    dtype = x0.dtype
    T = schedule.T
    dt = T / n_steps
    zeros = jnp.zeros((M,), dtype)

    def body(carry, xs):
        x, R, S, Q, bad = carry
        if noise is None:
            n = xs
            dB = _step_noise(noise_keys, n, dim, dt, dtype)
        else:
            n, dB = xs
        # Keeps fusion identical whether increments are generated or replayed.
        dB = jax.lax.optimization_barrier(dB)
        t_inf = (T - n * dt).astype(dtype)
        sig = schedule.sigma(t_inf)
        v = policy(x, t_inf)
        if cost_policy is None:
            u = v
            quad = 0.5 * jnp.sum(u**2, axis=-1)
        else:
            v = jax.lax.stop_gradient(v)
            x = jax.lax.stop_gradient(x)
            u = cost_policy(x, t_inf)
            quad = jnp.sum(u * v, axis=-1) - 0.5 * jnp.sum(u**2, axis=-1)
        R = R + (schedule.div_f(t_inf) + quad).astype(dtype) * dt
        S = S + jnp.sum(u * dB, axis=-1)
        if isinstance(schedule, VPSchedule):
            Q = Q + 0.5 * jnp.sum((u + sig * x / schedule.eta**2) ** 2, axis=-1) * dt
        x_new = x + (sig * v - schedule.f(x, t_inf)) * dt + sig * dB
        finite = jnp.all(jnp.isfinite(x_new))
        bad = jnp.where((bad < 0) & ~finite, n, bad)
        out = (x_new, dB) if record else None
        return (x_new, R, S, Q, bad), out

    steps = jnp.arange(n_steps)
    if noise is None:
        xs = steps
    else:
        xs = (steps, jnp.swapaxes(noise, 0, 1))
    init = (x0, zeros, zeros, zeros, jnp.asarray(-1, steps.dtype))
    (xT, R, S, Q, bad), hist = jax.lax.scan(body, init, xs)
    out = dict(x_final=xT, running_cost=R, stoch_int=S, dds_cost=Q, bad_step=bad)
    if record:
        states, dBs = hist
        out["states"] = jnp.concatenate([x0[:, None], jnp.swapaxes(states, 0, 1)], axis=1)
        out["noise"] = jnp.swapaxes(dBs, 0, 1)
    return out


@partial(jax.tree_util.register_dataclass,
         data_fields=["states", "noise", "x0", "x_final", "running_cost", "stoch_int",
                      "dds_cost", "log_prior"],
         meta_fields=["dt", "n_steps", "schedule", "direction"])
@dataclass
class PathBatch:
    """A batch of discretized controlled trajectories.

    ``states``/``noise`` are None when the simulation was run without
    recording (only endpoints kept). ``dds_cost`` holds the discretized
    integral of |u + sigma x / eta^2|^2 / 2 (zero for non-VP processes).
    """

    states: object
    noise: object
    x0: jnp.ndarray
    x_final: jnp.ndarray
    running_cost: jnp.ndarray
    stoch_int: jnp.ndarray
    dds_cost: jnp.ndarray
    log_prior: jnp.ndarray
    dt: float
    n_steps: int
    schedule: object
    direction: str = "generative"

    @property
    def size(self) -> int:
        return self.x_final.shape[0]


def simulate_paths(schedule, policy, x0, n_steps, noise_keys=None, noise=None, record=False,
                   cost_policy=None):
    """Traceable simulation returning (PathBatch, bad_step)."""
    out = rollout(schedule, policy, x0, n_steps, noise_keys=noise_keys, noise=noise,
                  record=record, cost_policy=cost_policy)
    batch = PathBatch(
        states=out.get("states"),
        noise=out.get("noise"),
        x0=x0,
        x_final=out["x_final"],
        running_cost=out["running_cost"],
        stoch_int=out["stoch_int"],
        dds_cost=out["dds_cost"],
        log_prior=schedule.log_prior(x0),
        dt=schedule.T / n_steps,
        n_steps=n_steps,
        schedule=schedule,
    )
    return batch, out["bad_step"]


def raise_if_bad(bad_step):
    step = int(bad_step)
    if step >= 0:
        raise SimulationError(f"non-finite state after Euler-Maruyama step {step} "
                              "(exploding control?)", step=step)


def simulate_controlled(schedule, policy, M: int, N: int, key=None, *, seed: int = 0,
                        x0=None, noise=None, record=True, dtype=jnp.float64):
    """Simulate M controlled trajectories with N Euler-Maruyama steps.

    Initial states come from the schedule's prior (truncated standard normal
    for the VP process, the origin for the Brownian reference) unless ``x0``
    is given. Brownian increments come from per-trajectory substreams of
    ``key`` (default ``PRNGKey(seed)``) unless ``noise`` (M, N, d) is given.
    """
    if N < 1 or M < 1:
        raise InputError("need M >= 1 trajectories and N >= 1 steps")
    if key is None:
        key = jax.random.PRNGKey(seed)
    prior_keys, noise_keys = trajectory_keys(key, M)
    if x0 is None:
        x0 = schedule.sample_prior(prior_keys, dtype)
    else:
        x0 = jnp.asarray(x0, dtype)
        if x0.shape != (M, schedule.dim):
            raise InputError(f"x0 must have shape {(M, schedule.dim)}")
    if noise is not None:
        noise = jnp.asarray(noise, dtype)
        if noise.shape != (M, N, schedule.dim):
            raise InputError(f"noise must have shape {(M, N, schedule.dim)}")
    batch, bad = _simulate_jit(schedule, policy, x0, N, noise_keys, noise, record)
    raise_if_bad(bad)
    return batch


@partial(jax.jit, static_argnums=(0, 3, 6))
def _simulate_jit(schedule, policy, x0, N, noise_keys, noise, record):
    return simulate_paths(schedule, policy, x0, N, noise_keys=noise_keys, noise=noise, record=record)


def simulate_inference(schedule: VPSchedule, y0, N: int, key):
    """Euler-Maruyama for the uncontrolled inference SDE dY = f dt + sigma dB on [0, T]."""
    y0 = jnp.asarray(y0)
    dt = schedule.T / N

    def body(y, xs):
        n, k = xs
        t = n * dt
        dB = jnp.sqrt(dt) * jax.random.normal(k, y.shape, y.dtype)
        return y + schedule.f(y, t) * dt + schedule.sigma(t) * dB, None

    keys = jax.random.split(key, N)
    yT, _ = jax.lax.scan(body, y0, (jnp.arange(N), keys))
    return yT
