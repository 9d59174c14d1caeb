"""Search orchestration: the explore/exploit episode schedule for both
protocols, hand-crafted baselines, multi-stage prune and fine-tune, and the
pre- vs post-fine-tune accuracy correlation study."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._io import atomic_write_text
from .agent import AgentConfig, DDPGAgent, RandomAgent, sigma_schedule
from .compress import CostModel, model_cost, sparsity_of
from .data import DataGenConfig, generate, split
from .env import FEATURES, CompressionEnv, RewardSpec
from .errors import ConfigError
from .nn import evaluate, save_weights, toy_convnet, train_epoch

PROTOCOLS = ("resource_constrained", "accuracy_guaranteed")
LOG_COLUMNS = ("episode", "phase", "reward", "val_acc", "cost_ratio", "sigma", "actions")


@dataclass
class SearchConfig:
    protocol: str = "resource_constrained"
    reward: str = "r_err"
    cost: str = "flops"
    alpha: float | None = 0.5
    prune: str = "channel"
    episodes_explore: int = 100
    episodes_exploit: int = 300
    seed: int = 0
    a_max: float = 0.8
    a_max_dense: float | None = None
    agent: str = "ddpg"
    reward_mode: str = "broadcast"
    updates_per_step: int = 1
    sigma_decay: float = 0.98
    state_features: tuple = FEATURES
    reward_subset: int | None = None
    select_by: str = "reward"
    finetune_epochs: int = 10
    finetune_lr: float = 0.02
    batch_size: int = 32

    def __post_init__(self):
        self.state_features = tuple(self.state_features)
        self.validate()

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "resource_constrained":
            if self.reward != "r_err":
                raise ConfigError("resource_constrained search uses the r_err reward")
            if self.alpha is None:
                raise ConfigError("resource_constrained search needs alpha")
            if not 0 <= self.alpha < 1:
                raise ConfigError("alpha must lie in [0, 1)")
        else:
            if self.reward not in ("r_flops", "r_param"):
                raise ConfigError("accuracy_guaranteed search uses r_flops or r_param")
            if self.alpha is not None:
                raise ConfigError("accuracy_guaranteed search runs without a budget (alpha unset)")
        if self.prune not in ("fine", "channel"):
            raise ConfigError(f"unknown prune kind {self.prune!r}")
        if self.agent not in ("ddpg", "random"):
            raise ConfigError(f"unknown agent {self.agent!r}")
        if self.select_by not in ("reward", "val_acc"):
            raise ConfigError("select_by must be reward or val_acc")
        unknown = set(self.state_features) - set(FEATURES)
        if unknown:
            raise ConfigError(f"unknown state features {sorted(unknown)}")
        if self.episodes_explore < 0 or self.episodes_exploit < 0:
            raise ConfigError("episode counts must be non-negative")

    @property
    def episodes(self):
        return self.episodes_explore + self.episodes_exploit

    @property
    def state_mask(self):
        return np.array([1.0 if f in self.state_features else 0.0 for f in FEATURES])

    def agent_config(self):
        return AgentConfig(reward_mode=self.reward_mode, updates_per_step=self.updates_per_step,
                           sigma_decay=self.sigma_decay)

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return SearchConfig(**values)


@dataclass
class SearchResult:
    best_policy: list
    best_reward: float
    best_val_acc: float
    best_cost: object
    best_net: object
    log: list
    best_by_acc: dict = field(default_factory=dict)
    agent: object = None

    def running_best(self):
        return list(np.maximum.accumulate([row["reward"] for row in self.log]))


def make_env(cfg, net, val, reference=None, cost_model=None):
    cost_model = cost_model or CostModel.parse(cfg.cost)
    return CompressionEnv(
        net, val, cost_model, prune=cfg.prune, alpha=cfg.alpha, a_max=cfg.a_max,
        a_max_dense=cfg.a_max_dense, reward_spec=RewardSpec(cfg.reward), reference=reference,
        reward_subset=cfg.reward_subset, subset_seed=cfg.seed, state_mask=cfg.state_mask,
    )


def _better(out, best, select_by):
    if best is None:
        return True
    key = out.reward if select_by == "reward" else out.val_acc
    best_key = best.reward if select_by == "reward" else best.val_acc
    if key != best_key:
        return key > best_key
    # equal scores: the cheaper model wins
    return out.cost_ratio < best.cost_ratio


def run_search(cfg, net, val, reference=None, cost_model=None, reward_fn=None, progress=None):
    """Run the full explore/exploit schedule and return the best episode found.

    ``reward_fn`` optionally post-processes each episode's reward (used to
    test invariance to constant reward offsets).
    """
    env = make_env(cfg, net, val, reference, cost_model)
    agent_cls = DDPGAgent if cfg.agent == "ddpg" else RandomAgent
    agent = agent_cls(len(FEATURES), cfg.agent_config(), seed=cfg.seed)
    log, best, best_acc = [], None, None
    for ep in range(cfg.episodes):
        exploring = ep < cfg.episodes_explore
        if agent.learns:
            sigma = sigma_schedule(ep, cfg.episodes_explore, agent.config.sigma0, cfg.sigma_decay)
        else:
            sigma = agent.config.sigma0
        s = env.reset()
        transitions = []
        done = False
        while not done:
            a = agent.act(s, sigma)
            s2, done = env.step(a)
            transitions.append((s, a, s2))
            if not exploring:
                for _ in range(agent.config.updates_per_step):
                    agent.update()
            s = s2
        out = env.outcome()
        if reward_fn is not None:
            out.reward = reward_fn(out.reward)
        agent.store_episode(transitions, out.reward)
        agent.observe_episode_reward(out.reward)
        log.append({
            "episode": ep,
            "phase": "explore" if exploring else "exploit",
            "reward": out.reward,
            "val_acc": out.val_acc,
            "cost_ratio": out.cost_ratio,
            "sigma": sigma,
            "actions": list(out.actions),
        })
        if _better(out, best, cfg.select_by):
            best = out
        if _better(out, best_acc, "val_acc"):
            best_acc = out
        if progress is not None:
            progress(ep, out)
    return SearchResult(
        best_policy=list(best.actions), best_reward=best.reward, best_val_acc=best.val_acc,
        best_cost=best.cost, best_net=best.net, log=log,
        best_by_acc={"policy": list(best_acc.actions), "reward": best_acc.reward, "val_acc": best_acc.val_acc},
        agent=agent,
    )


# ---------------------------------------------------------------------------
# output files


def log_to_csv(log):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in log:
        writer.writerow([
            row["episode"], row["phase"], repr(float(row["reward"])), repr(float(row["val_acc"])),
            repr(float(row["cost_ratio"])), repr(float(row["sigma"])),
            ";".join(repr(float(a)) for a in row["actions"]),
        ])
    return buf.getvalue()


def read_log_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append({
                "episode": int(rec["episode"]),
                "phase": rec["phase"],
                "reward": float(rec["reward"]),
                "val_acc": float(rec["val_acc"]),
                "cost_ratio": float(rec["cost_ratio"]),
                "sigma": float(rec["sigma"]),
                "actions": [float(a) for a in rec["actions"].split(";")] if rec["actions"] else [],
            })
    return rows


def write_search_outputs(result, out_dir, config_echo=None):
    """Write episodes.csv, best_policy.json, best_model.amcw and config_echo."""
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "episodes.csv"), log_to_csv(result.log))
    summary = {
        "policy": result.best_policy,
        "reward": result.best_reward,
        "val_acc_pre_finetune": result.best_val_acc,
        "cost": result.best_cost.to_dict(),
        "best_by_val_acc": result.best_by_acc,
    }
    atomic_write_text(os.path.join(out_dir, "best_policy.json"), json.dumps(summary, indent=2) + "\n")
    save_weights(result.best_net, os.path.join(out_dir, "best_model.amcw"))
    if config_echo is not None:
        atomic_write_text(os.path.join(out_dir, "config_echo"), config_echo)


# ---------------------------------------------------------------------------
# baselines and fine-tuning


def finetune(net, train, epochs=10, lr=0.02, batch_size=32, seed=0):
    """SGD fine-tuning on a copy; masks stay frozen."""
    net = net.copy()
    for e in range(epochs):
        train_epoch(net, train, lr, batch_size, seed=seed * 1000 + e)
    return net


@dataclass
class Baseline:
    net: object
    train: object
    val: object
    test: object
    val_acc: float
    history: list


def build_baseline(seed=0, data_cfg=None, fractions=(0.7, 0.2, 0.1), epochs=30, lr=0.02, batch_size=32):
    """Synthetic data plus a trained six-weighted-layer conv net."""
    data_cfg = data_cfg or DataGenConfig(seed=seed)
    data = generate(data_cfg)
    tr, va, te = split(data, fractions, seed=data_cfg.seed)
    net = toy_convnet(tr.image_shape, data_cfg.num_classes, seed=seed)
    history = []
    for e in range(epochs):
        train_epoch(net, tr, lr, batch_size, seed=seed * 1000 + e)
        history.append(evaluate(net, va))
    return Baseline(net, tr, va, te, history[-1] if history else evaluate(net, va), history)


def handcrafted_ratios(policy, num_layers, scale, a_max, skip_first):
    positions = list(range(1, num_layers)) if skip_first else list(range(num_layers))
    p = len(positions)
    if policy == "uniform":
        weights = [1.0] * p
    elif policy == "shallow":
        weights = [1.0 - i / p for i in range(p)]
    elif policy == "deep":
        weights = [i / p for i in range(p)]
    else:
        raise ValueError(f"unknown hand-crafted policy {policy!r}")
    ratios = [0.0] * num_layers
    for pos, w in zip(positions, weights):
        ratios[pos] = min(scale * w, a_max)
    return ratios


def _unbounded_cost_ratio(env, actions):
    alpha, env.alpha = env.alpha, None
    try:
        env.reset()
        for a in actions:
            env.step(a)
        return model_cost(env.net, env.cost_model, baseline=env.reference).ratio_vs_baseline
    finally:
        env.alpha = alpha
        env.done = True


def run_handcrafted(policy, cfg, net, val, reference=None):
    """Rule-based policy scaled so that the unbounded policy already meets ``alpha``.

    The result still passes through the budget-enforcing environment, so the
    cost guarantee is identical to the learned search. Channel quantization
    can make the realized reduction overshoot ``alpha`` slightly.
    """
    env = make_env(cfg, net, val, reference)
    target = 1.0 - cfg.alpha
    skip_first = cfg.prune == "channel"
    lo, hi = 0.0, 1.0
    while _unbounded_cost_ratio(env, handcrafted_ratios(policy, env.T, hi, cfg.a_max, skip_first)) > target and hi < 64:
        hi *= 2
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _unbounded_cost_ratio(env, handcrafted_ratios(policy, env.T, mid, cfg.a_max, skip_first)) <= target:
            hi = mid
        else:
            lo = mid
    # ``hi`` is the smallest scale whose unbounded policy meets the budget, so
    # the bounding never has to reshape the rule
    return env.run_policy(handcrafted_ratios(policy, env.T, hi, cfg.a_max, skip_first))


# ---------------------------------------------------------------------------
# multi-stage and correlation protocols


@dataclass
class StageRecord:
    density_target: float
    density: float
    pre_acc: float
    post_acc: float
    policy: list
    net: object = field(default=None, repr=False)


def iterative_prune_finetune(cfg, densities, net, train, val, progress=None):
    """Fine-grained search and fine-tune at each overall density, feeding each stage's model to the next."""
    densities = [float(d) for d in densities]
    if any(b >= a for a, b in zip(densities, densities[1:])):
        raise ConfigError("densities must be strictly decreasing")
    reference = net
    current = net
    stages = []
    for k, d in enumerate(densities):
        stage_cfg = cfg.replace(prune="fine", protocol="resource_constrained", reward="r_err",
                                alpha=1.0 - d, seed=cfg.seed + k)
        result = run_search(stage_cfg, current, val, reference=reference, cost_model=CostModel(cfg.cost))
        tuned = finetune(result.best_net, train, cfg.finetune_epochs, cfg.finetune_lr, cfg.batch_size, seed=cfg.seed + k)
        stages.append(StageRecord(d, 1.0 - sparsity_of(tuned), result.best_val_acc, evaluate(tuned, val),
                                  result.best_policy, tuned))
        if progress is not None:
            progress(k, stages[-1])
        current = tuned
    return current, stages


def spearman(x, y):
    """Spearman rank correlation, or None when either side is constant."""
    from scipy.stats import spearmanr

    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        return None
    rho = spearmanr(x, y).statistic
    return None if not np.isfinite(rho) else float(rho)


def proxy_correlation_study(cfg, num_policies, net, train, val, policies=None, seed=0):
    """Pre- vs post-fine-tune accuracy over random feasible policies.

    Returns ``(rho, rows)``; ``rho`` is None when undefined.
    """
    if policies is None and num_policies < 10:
        raise ValueError("the correlation study needs at least 10 policies")
    env = make_env(cfg, net, val)
    rng = np.random.default_rng(seed)
    if policies is None:
        policies = [list(rng.random(env.T)) for _ in range(num_policies)]
    rows = []
    for i, actions in enumerate(policies):
        out = env.run_policy(actions)
        tuned = finetune(out.net, train, cfg.finetune_epochs, cfg.finetune_lr, cfg.batch_size, seed=seed + i)
        rows.append({"policy": list(out.actions), "pre_acc": out.val_acc, "post_acc": evaluate(tuned, val),
                     "cost_ratio": out.cost_ratio})
    rho = spearman([r["pre_acc"] for r in rows], [r["post_acc"] for r in rows])
    return rho, rows


def ablate_state(cfg, feature_sets, net, val):
    """Best reward per state-feature subset (excluded features are zeroed)."""
    out = {}
    for name, feats in feature_sets.items():
        res = run_search(cfg.replace(state_features=tuple(feats)), net, val)
        out[name] = res.best_reward
    return out


def config_to_dict(cfg):
    d = asdict(cfg)
    d["state_features"] = list(cfg.state_features)
    return d
