"""The DDPG agent on a one-step problem with a known answer.

Every episode is a single step from a fixed state, and the reward is
-(a - 0.7)^2. A working actor-critic must drive its deterministic action
to 0.7; the exploration noise follows the same schedule as the real search
(100 episodes at sigma 0.5, then decay by 0.98 per episode).
"""

from rlprune.agent import run_bandit, sigma_schedule

for episode in (0, 99, 100, 150, 399):
    print(f"sigma at episode {episode:3d}: {sigma_schedule(episode, 100):.4f}")

for seed in range(3):
    print(f"seed {seed}: final mu(s) = {run_bandit(seed):.3f}  (optimum 0.7)")
