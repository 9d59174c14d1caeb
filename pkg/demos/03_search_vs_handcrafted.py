"""Learned layer-wise ratios versus rule-based ones at half the FLOPs.

A small conv net is trained on the synthetic grating data, then compressed
to 50% of its FLOPs by channel pruning in three ways: uniform, shallow-heavy
and deep-heavy rules, and the DDPG search. All are scored without
fine-tuning, which is the signal the search itself optimizes. The schedule
is shortened (120 instead of 400 episodes) so the script runs in about a
minute; at this length the best rule can still beat the search, which needs
the full schedule to pull ahead reliably.
"""

import numpy as np

from rlprune.search import SearchConfig, build_baseline, finetune, run_handcrafted, run_search
from rlprune.nn import evaluate

base = build_baseline(seed=1)
print(f"baseline val accuracy {base.val_acc:.3f}")

cfg = SearchConfig(seed=1, alpha=0.5, episodes_explore=30, episodes_exploit=90)
for policy in ("uniform", "shallow", "deep"):
    out = run_handcrafted(policy, cfg, base.net, base.val)
    print(f"{policy:8s} ratios {np.round(out.actions, 2)}  acc {out.val_acc:.3f}  FLOPs {out.cost_ratio:.3f}")

result = run_search(cfg, base.net, base.val)
print(f"{'ddpg':8s} ratios {np.round(result.best_policy, 2)}  acc {result.best_val_acc:.3f}  "
      f"FLOPs {result.best_cost.ratio_vs_baseline:.3f}")

# The pruned model recovers most of its accuracy after a short fine-tune.
tuned = finetune(result.best_net, base.train, epochs=5)
print(f"after 5 fine-tuning epochs: {evaluate(tuned, base.val):.3f}")
