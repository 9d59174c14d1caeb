"""Budget guarantee: any action sequence ends inside the resource budget.

The environment bounds every raw action so that, whatever the agent does at
the remaining layers, the requested fraction of FLOPs can still be removed.
Here a batch of purely random action sequences is pushed through both
pruning modes and the realized reduction is compared with the target.
"""

import numpy as np

from rlprune.compress import CostModel, model_cost
from rlprune.data import DataGenConfig, generate
from rlprune.env import CompressionEnv
from rlprune.nn import toy_convnet

net = toy_convnet(seed=0)
val = generate(DataGenConfig(num_per_class=5))  # scores are not needed here
rng = np.random.default_rng(0)

for prune in ("channel", "fine"):
    for alpha in (0.3, 0.5, 0.7):
        env = CompressionEnv(net, val, CostModel("flops"), prune=prune, alpha=alpha, a_max=0.8)
        reductions = []
        for _ in range(200):
            env.reset()
            for raw in rng.random(env.T):
                env.step(raw)
            reductions.append(1 - model_cost(env.net, env.cost_model, baseline=net).ratio_vs_baseline)
        reductions = np.array(reductions)
        print(f"{prune:7s} alpha={alpha:.1f}  min reduction {reductions.min():.4f}  "
              f"mean {reductions.mean():.4f}  violations {(reductions < alpha).sum()}")

# A request to prune nothing is overridden wherever the layers still to come
# could not cover the remaining budget on their own, even at their caps.
env = CompressionEnv(net, val, CostModel("flops"), prune="fine", alpha=0.5)
env.reset()
for _ in range(env.T):
    env.step(0.0)
print("all-zero request ->", np.round(env.actions, 3))
