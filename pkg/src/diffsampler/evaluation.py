"""Log-normalizer estimators, sample moments and evaluation reports.

Both log Z estimators use the per-trajectory work

    W = R + S + log p_prior(X_0) + log p_ref(X_T) - log rho(X_T).

The variational bound is -mean(W) (the stochastic integral S has zero mean
but lowers the variance); the importance-sampling estimate is
log mean exp(-W), aggregated with logsumexp.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, EvalError, InputError, SimulationError
from .nn import ControlPolicy
from .sde import raise_if_bad, simulate_paths, trajectory_keys

CHUNK = 2048
REPORT_HEADER = ["target", "n_steps", "n_samples", "seed", "logz_bound", "logz_is", "logz_is_stderr",
                 "ess", "sq_norm", "sq_norm_relerr", "l1_norm", "l1_norm_relerr", "avg_std",
                 "avg_std_relerr", "seconds"]


@dataclass
class PathSummary:
    """Per-trajectory functionals of an evaluation run (numpy arrays)."""

    running_cost: np.ndarray
    stoch_int: np.ndarray
    log_prior: np.ndarray
    log_reference: np.ndarray
    log_target: np.ndarray
    x_final: np.ndarray

    @property
    def work(self):
        return self.running_cost + self.stoch_int + self.log_prior + self.log_reference - self.log_target


def with_dtype(policy, dtype):
    """Cast a network policy's parameters (other policies are returned unchanged)."""
    if isinstance(policy, ControlPolicy):
        params = jax.tree_util.tree_map(lambda p: jnp.asarray(p, dtype), policy.params)
        return policy.with_params(params)
    return policy


@partial(jax.jit, static_argnums=(0, 1, 4))
def _chunk(schedule, target, policy, keys, N):
    prior_keys, noise_keys = keys
    x0 = schedule.sample_prior(prior_keys, jnp.float64)
    batch, bad = simulate_paths(schedule, policy, x0, N, noise_keys=noise_keys)
    return (batch.running_cost, batch.stoch_int, batch.log_prior,
            schedule.log_terminal_reference(batch.x_final), target.log_rho(batch.x_final),
            batch.x_final, bad)


def simulate_summary(policy, target, schedule, M: int, N: int, seed: int = 0,
                     chunk: int = CHUNK) -> PathSummary:
    """Simulate M trajectories in float64, in chunks, without storing whole paths.

    Trajectory i always uses the i-th substream of ``PRNGKey(seed)``, so the
    result does not depend on the chunk size.
    """
    if M < 1 or N < 1:
        raise InputError("need M >= 1 samples and N >= 1 steps")
    if schedule.dim != target.dim:
        raise ConfigError(f"schedule dimension {schedule.dim} != target dimension {target.dim}")
    policy = with_dtype(policy, jnp.float64)
    key = jax.random.PRNGKey(seed)
    parts = []
    for start in range(0, M, chunk):
        m = min(chunk, M - start)
        keys = trajectory_keys(key, m, offset=start)
        *vals, bad = _chunk(schedule, target, policy, keys, N)
        try:
            raise_if_bad(bad)
        except SimulationError as exc:
            raise EvalError(f"evaluation simulation failed: {exc}") from exc
        parts.append([np.asarray(v) for v in vals])
    cols = [np.concatenate(c) for c in zip(*parts)]
    return PathSummary(*cols)


def bound_from_work(work):
    """(-mean W, stderr) from per-trajectory work values."""
    work = np.asarray(work, dtype=np.float64)
    if not np.all(np.isfinite(work)):
        raise EvalError(f"non-finite work for trajectory {int(np.flatnonzero(~np.isfinite(work))[0])}")
    se = float(np.std(work, ddof=1) / math.sqrt(work.size)) if work.size > 1 else 0.0
    return float(-np.mean(work)), se


def importance_from_log_weights(log_w):
    """(log mean exp(l), delta-method stderr, ESS) from log-weights l."""
    log_w = np.asarray(log_w, dtype=np.float64)
    if np.any(np.isnan(log_w)) or np.any(log_w == np.inf):
        raise EvalError("log-weights contain NaN or +inf")
    if np.all(log_w == -np.inf):
        raise EvalError("all importance weights are zero")
    M = log_w.size
    logz = float(logsumexp(log_w) - math.log(M))
    w = np.exp(log_w - log_w.max())
    mean = w.mean()
    se = float(np.std(w, ddof=1) / (math.sqrt(M) * mean)) if M > 1 else 0.0
    ess = float(w.sum() ** 2 / np.sum(w**2))
    return logz, se, ess


def logz_lower_bound(policy, target, M, N, seed=0, schedule=None):
    """Variational lower bound on log Z and its standard error."""
    schedule = schedule or policy.schedule
    return bound_from_work(simulate_summary(policy, target, schedule, M, N, seed).work)


def logz_importance(policy, target, M, N, seed=0, schedule=None):
    """Importance-sampled log Z with its stderr and effective sample size."""
    schedule = schedule or policy.schedule
    return importance_from_log_weights(-simulate_summary(policy, target, schedule, M, N, seed).work)


@dataclass(frozen=True)
class Moments:
    sq_norm: float
    l1_norm: float
    per_dim_std: tuple

    @property
    def avg_std(self):
        return float(np.mean(self.per_dim_std))


def estimate_moments(samples) -> Moments:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError("need a (M, d) sample array with M >= 2")
    return Moments(float(np.mean(np.sum(x**2, axis=1))), float(np.mean(np.sum(np.abs(x), axis=1))),
                   tuple(float(s) for s in np.std(x, axis=0, ddof=1)))


def relative_error(est, ref):
    return abs(est - ref) / abs(ref)


@dataclass
class EvalReport:
    target: str
    n_steps: int
    n_samples: int
    seed: int
    logz_bound: float
    logz_bound_stderr: float
    logz_is: float
    logz_is_stderr: float
    ess: float
    moments: Moments
    sq_norm_relerr: float
    l1_norm_relerr: float
    avg_std_relerr: float
    seconds: float
    samples: np.ndarray | None = None

    def row(self):
        m = self.moments
        vals = [self.logz_bound, self.logz_is, self.logz_is_stderr, self.ess, m.sq_norm,
                self.sq_norm_relerr, m.l1_norm, self.l1_norm_relerr, m.avg_std, self.avg_std_relerr]
        return [self.target, self.n_steps, self.n_samples, self.seed] + [f"{v:.17g}" for v in vals] + [
            f"{self.seconds:.3f}"]


def report(policy, target, N, M, seed=0, schedule=None, keep_samples=False) -> EvalReport:
    """Evaluate one policy at one step count against the target's reference statistics."""
    t0 = time.perf_counter()
    schedule = schedule or policy.schedule
    summ = simulate_summary(policy, target, schedule, M, N, seed)
    bound, bound_se = bound_from_work(summ.work)
    logz, se, ess = importance_from_log_weights(-summ.work)
    mom = estimate_moments(summ.x_final)
    ref = target.reference_stats()
    return EvalReport(
        target=target.spec, n_steps=N, n_samples=M, seed=seed,
        logz_bound=bound, logz_bound_stderr=bound_se, logz_is=logz, logz_is_stderr=se, ess=ess,
        moments=mom,
        sq_norm_relerr=relative_error(mom.sq_norm, ref.expected_sq_norm),
        l1_norm_relerr=relative_error(mom.l1_norm, ref.expected_l1_norm),
        avg_std_relerr=relative_error(mom.avg_std, ref.avg_std),
        seconds=time.perf_counter() - t0,
        samples=summ.x_final if keep_samples else None,
    )


def write_reports(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())


def write_samples(samples, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(samples, dtype=np.float64):
            w.writerow([f"{v:.17g}" for v in row])


def evaluate(checkpoint, target=None, steps=(100, 200, 400, 800), M=6000, seed=0, out=None,
             dump_samples=None, use_ema=True):
    """One EvalReport per step count, using the checkpoint's EMA parameters.

    ``dump_samples`` receives the terminal samples of the last step count.
    """
    cfg = checkpoint.config
    ckpt_target = cfg.target_density()
    if target is None:
        target = ckpt_target
    elif target.spec != ckpt_target.spec:
        raise ConfigError(f"target {target.spec!r} does not match the checkpoint's {ckpt_target.spec!r}")
    policy = checkpoint.policy(use_ema=use_ema)
    reports = [report(policy, target, N, M, seed, keep_samples=dump_samples is not None)
               for N in steps]
    if out is not None:
        write_reports(reports, out)
    if dump_samples is not None:
        write_samples(reports[-1].samples, dump_samples)
    return reports


def sample(policy, n, N, seed=0, schedule=None, target=None):
    """Terminal states of n controlled trajectories (float64)."""
    target = target or policy.target
    schedule = schedule or policy.schedule
    return simulate_summary(policy, target, schedule, n, N, seed).x_final


def nearest_mode_fractions(samples, modes):
    """Fraction of samples whose nearest mode is each entry of ``modes``."""
    x = np.asarray(samples)
    modes = np.asarray(modes)
    idx = np.argmin(np.sum((x[:, None, :] - modes[None]) ** 2, axis=-1), axis=1)
    return np.bincount(idx, minlength=len(modes)) / len(x)


def sign_fractions(samples, axis=0):
    """(fraction with x_axis < 0, fraction with x_axis > 0)."""
    x = np.asarray(samples)[:, axis]
    return float(np.mean(x < 0)), float(np.mean(x > 0))


def marginal_histograms(states, lo=-10.0, hi=10.0, bins=100):
    """Per-step, per-coordinate histograms of recorded states (M, N+1, d) on a fixed grid.

    Returns (edges, counts) with counts of shape (N+1, d, bins).
    """
    states = np.asarray(states)
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.empty(states.shape[1:] + (bins,), dtype=np.int64)
    for n in range(states.shape[1]):
        for j in range(states.shape[2]):
            counts[n, j] = np.histogram(states[:, n, j], bins=edges)[0]
    return edges, counts
