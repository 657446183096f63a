"""Log Z estimates under the exact optimal control for N(0, I_d).

The control is optimal, so any remaining error is Euler-Maruyama bias. The
bias shrinks like 1/N and grows with d, and the importance-sampled
estimate overshoots by about Var(W)/2 - E[W].

    python demos/analytic_gaussian.py
"""

from diffsampler import Gaussian, GaussianOptimalPolicy, VPSchedule
from diffsampler.evaluation import bound_from_work, importance_from_log_weights, simulate_summary

M = 4096

print(f"{'d':>3} {'N':>5} {'bound':>9} {'logz_is':>9} {'ess/M':>6}")
for d in (1, 2, 10):
    s = VPSchedule(d)
    policy = GaussianOptimalPolicy(s, 0.0, 1.0)
    for N in (100, 400, 1600):
        work = simulate_summary(policy, Gaussian(d), s, M, N, seed=0).work
        bound, _ = bound_from_work(work)
        logz, _, ess = importance_from_log_weights(-work)
        print(f"{d:>3} {N:>5} {bound:>+9.4f} {logz:>+9.4f} {ess / M:>6.2f}")
