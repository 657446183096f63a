"""Reference log Z and moments of the benchmark targets.

GMM, funnel and Gaussian values are closed form. Double-well values come
from 1-D quadrature of the factorized density.

    python demos/reference_stats.py
"""

from diffsampler import parse_target

for spec in ("gmm", "funnel:d=10,nu=3", "dw:d=2,w=1,delta=3", "dw:d=5,w=5,delta=3", "dw:d=50,w=5,delta=2",
             "gauss:d=2,nu=1,m=0"):
    ref = parse_target(spec).reference_stats()
    print(f"{spec:<22} log_Z {ref.log_Z:+.6f}  E|x|^2 {ref.expected_sq_norm:9.4f}  "
          f"E|x|_1 {ref.expected_l1_norm:8.4f}  avg std {ref.avg_std:.4f}  ({ref.provenance})")
