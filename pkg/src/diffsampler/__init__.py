"""Time-reversed diffusion sampler for unnormalized densities."""

import jax

jax.config.update("jax_enable_x64", True)

from .errors import *  # noqa: E402,F401,F403
from .targets import (  # noqa: E402
    GMM,
    DoubleWell,
    Funnel,
    Gaussian,
    ReferenceStats,
    Shifted,
    grad_log_rho,
    log_rho,
    parse_target,
    reference_stats,
)
from .sde import (  # noqa: E402
    BrownianReference,
    GaussianOptimalPolicy,
    PathBatch,
    VPSchedule,
    ZeroPolicy,
    analytic_optimal_drift_gaussian,
    simulate_controlled,
    vp_transition,
)
from .nn import ControlPolicy, NetConfig, init_policy, policy_eval  # noqa: E402

__version__ = "0.1.0"
