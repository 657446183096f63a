"""Short DIS training run on the 9-mode Gaussian mixture.

Prints the lower bound, the importance-sampled log Z and the share of
samples nearest to each mode at a few checkpoints. Reverse-KL training
starts from a policy that sends almost all mass to the central mode, and
at this budget it mostly stays there.

    python demos/train_gmm.py [gradient_steps]
"""

import sys

import numpy as np

from diffsampler.config import TrainConfig
from diffsampler.evaluation import (bound_from_work, importance_from_log_weights, nearest_mode_fractions,
                                    simulate_summary)
from diffsampler.nn import ControlPolicy
from diffsampler.train import clip_schedule, train

K = int(sys.argv[1]) if len(sys.argv) > 1 else 500
cfg = TrainConfig(target="gmm", batch_size=256, gradient_steps=K, steps_schedule=((100, 1.0),), width=64,
                  precision="float32")
target, process = cfg.target_density(), cfg.process()


def show(k, state):
    if (k + 1) % max(1, K // 5):
        return
    policy = ControlPolicy(state.params, target, process, cfg.net(), clip_schedule(k, cfg), cfg.detach_score)
    summ = simulate_summary(policy, target, process, 2048, 100, seed=0)
    bound, _ = bound_from_work(summ.work)
    logz, _, ess = importance_from_log_weights(-summ.work)
    modes = np.round(nearest_mode_fractions(summ.x_final, target.means), 3)
    print(f"step {k + 1:>5}  bound {bound:+.3f}  logz_is {logz:+.3f}  ESS {ess:6.0f}  modes {modes}")


train(cfg, progress=False, callback=show)
