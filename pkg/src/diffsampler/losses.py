"""Path-space objectives computed from a simulated PathBatch.

All objectives are built from the per-trajectory work

    W = R + S + log p_prior(X_0) + log p_ref(X_T) - log rho(X_T)

where R is the discretized running cost, S the Ito sum of u . dB and p_ref
the terminal density of the uncontrolled half-bridge (absent for the VP
process). exp(-W) is an unnormalized importance weight whose mean is Z.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from .errors import InputError, LossError
from .sde import BrownianReference, VPSchedule, is_traced


@dataclass
class PathFunctionals:
    running_cost: jnp.ndarray
    stoch_int: jnp.ndarray
    log_prior: jnp.ndarray
    log_target: jnp.ndarray
    log_reference: jnp.ndarray

    @property
    def work(self):
        return self.running_cost + self.stoch_int + self.log_prior + self.log_reference - self.log_target


def path_functionals(batch, target) -> PathFunctionals:
    return PathFunctionals(
        running_cost=batch.running_cost,
        stoch_int=batch.stoch_int,
        log_prior=batch.log_prior,
        log_target=target.log_rho(batch.x_final),
        log_reference=batch.schedule.log_terminal_reference(batch.x_final),
    )


def _checked_mean(terms, name):
    if not is_traced(terms):
        bad = np.flatnonzero(~np.isfinite(np.asarray(terms)))
        if bad.size:
            raise LossError(f"{name}: non-finite term for trajectory {bad[0]}", index=int(bad[0]))
    return jnp.mean(terms)


def dis_loss(batch, target, add_stochastic_integral=False):
    """Monte Carlo estimate of E[R + log p_prior(X_0) - log rho(X_T)] (optionally + S)."""
    if not isinstance(batch.schedule, VPSchedule):
        raise InputError("dis_loss expects trajectories of the VP generative process")
    pf = path_functionals(batch, target)
    terms = pf.running_cost + pf.log_prior - pf.log_target
    if add_stochastic_integral:
        terms = terms + pf.stoch_int
    return _checked_mean(terms, "dis_loss")


def pis_loss(batch, target, add_stochastic_integral=False):
    """E[R + log N(X_T; 0, sigma^2 T I) - log rho(X_T)] for the half-bridge process."""
    if not isinstance(batch.schedule, BrownianReference):
        raise InputError("pis_loss expects trajectories of the Brownian reference process")
    pf = path_functionals(batch, target)
    terms = pf.running_cost + pf.log_reference - pf.log_target
    if add_stochastic_integral:
        terms = terms + pf.stoch_int
    return _checked_mean(terms, "pis_loss")


def dds_loss(batch, target):
    """E[int |u + sigma X / eta^2|^2 / 2 ds + log N(X_T; 0, eta^2 I) - log rho(X_T)]."""
    s = batch.schedule
    if not isinstance(s, VPSchedule):
        raise InputError("dds_loss is defined for the VP process only")
    xT = batch.x_final
    log_n = -0.5 * jnp.sum(xT**2, axis=-1) / s.eta**2 - 0.5 * s.dim * jnp.log(2 * jnp.pi * s.eta**2)
    terms = batch.dds_cost + log_n - target.log_rho(xT)
    return _checked_mean(terms, "dds_loss")


def logvar_loss(batch, target):
    """Unbiased sample variance of W over the batch.

    Intended for batches simulated with the dynamics detached (see
    ``simulate_paths(..., cost_policy=...)``) so that gradients only flow
    through the control inside R and S.
    """
    if batch.size < 2:
        raise InputError("log-variance loss needs at least two trajectories")
    w = path_functionals(batch, target).work
    _checked_mean(w, "logvar_loss")
    return jnp.var(w, ddof=1)


LOSSES = {"dis": dis_loss, "pis": pis_loss, "dds": dds_loss, "logvar": logvar_loss}
