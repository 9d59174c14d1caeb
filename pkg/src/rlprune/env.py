"""Layer-by-layer compression environment.

One episode walks the weighted layers in order. At each layer the agent sees
an 11-feature embedding, emits a ratio in [0, 1], the ratio is bounded so the
overall budget stays reachable (resource-constrained protocol only),
quantized, and applied. After the last layer the pruned, not fine-tuned,
network is scored on the validation split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import compress
from .compress import CostModel, input_groups, model_cost
from .errors import InfeasibleBudget
from .nn import evaluate

FEATURES = ("t", "n", "c", "h", "w", "stride", "k", "flops", "reduced", "rest", "a_prev")
REWARD_KINDS = ("r_err", "r_flops", "r_param")
PRUNE_KINDS = ("fine", "channel")

_TOL = 1e-9


# ---------------------------------------------------------------------------
# budget bookkeeping


class BudgetTracker:
    """Running resource bookkeeping for separable per-layer costs.

    ``costs[j]`` is layer j's full resource, ``a_max`` a scalar or per-layer
    cap on the removable fraction. ``alpha`` is the overall fraction that must
    be removed, or None when no budget is enforced.
    """

    def __init__(self, costs, alpha=None, a_max=0.8):
        self.costs = [float(c) for c in costs]
        self.a_max = [float(a_max)] * len(self.costs) if np.isscalar(a_max) else [float(a) for a in a_max]
        self.alpha = alpha
        self.w_all = float(sum(self.costs))
        self.t = 0
        self.w_reduced = 0.0
        self.duty_calls = 0

    @property
    def w_rest(self):
        return float(sum(self.costs[self.t + 1:]))

    @property
    def max_rest(self):
        """Most the later layers can still remove."""
        return float(sum(a * c for a, c in zip(self.a_max[self.t + 1:], self.costs[self.t + 1:])))

    def duty(self):
        self.duty_calls += 1
        return self.alpha * self.w_all - self.max_rest - self.w_reduced

    def feasible(self):
        if self.alpha is None:
            return True
        reachable = sum(a * c for a, c in zip(self.a_max, self.costs))
        return reachable >= self.alpha * self.w_all - _TOL * self.w_all

    def commit(self, amount):
        self.w_reduced += amount
        self.t += 1

    def reduced_fraction(self):
        return self.w_reduced / self.w_all


def bound_action(raw, tracker, layer_cost=None, commit=True):
    """Clip ``raw`` to the layer cap, then raise it to the layer's duty share.

    ``duty = alpha * W_all - a_max * W_rest - W_reduced`` is what this layer
    must remove if every later layer is pruned maximally. Commits the removed
    amount to ``tracker`` unless ``commit`` is False.
    """
    t = tracker.t
    layer_cost = tracker.costs[t] if layer_cost is None else layer_cost
    cap = tracker.a_max[t]
    a = min(raw, cap)
    if tracker.alpha is not None:
        lower = tracker.duty() / layer_cost
        if lower > cap + _TOL:
            raise InfeasibleBudget(f"layer {t} must remove {lower:.4f} > a_max {cap}")
        a = max(a, lower)
    if commit:
        tracker.commit(a * layer_cost)
    return a


class ChannelBudget:
    """Budget bookkeeping for channel pruning, where costs are not separable.

    Cutting input channels of layer t also cuts output filters of layer t-1,
    so a layer's cost depends on two decisions. Shapes are tracked as integer
    channel counts; ``cost_of(keep)`` evaluates the whole network for any
    vector of kept input-channel counts.
    """

    def __init__(self, net, cost_model, alpha=None, a_max=0.8):
        self.cost_model = cost_model
        self.alpha = alpha
        specs = net.specs()
        self.specs = [specs[i] for i in net.weighted_indices]
        groups = [input_groups(net, p) for p in range(len(self.specs))]
        self.groups = [g for g, _ in groups]
        self.group_size = [s for _, s in groups]
        self.final_out = self.specs[-1].n
        self.qmax = [0] + [min(int(math.floor(a_max * g + 1e-9)), g - 1) for g in self.groups[1:]]
        # params and FLOPs are n_out * c_in times a per-layer constant
        self._unit = None
        if cost_model.kind != "latency":
            self._unit = [cost_model.layer_cost(compress.resized_spec(s, 1, 1)) for s in self.specs]
        self.keep = list(self.groups)
        self.w_all = self.cost_of(self.groups)
        self.t = 0
        self.duty_calls = 0

    def layer_costs(self, keep):
        out = []
        for j, spec in enumerate(self.specs):
            n_out = keep[j + 1] if j + 1 < len(keep) else self.final_out
            c_in = keep[j] * self.group_size[j]
            if self._unit is not None:
                out.append(n_out * c_in * self._unit[j])
            else:
                out.append(self.cost_model.layer_cost(compress.resized_spec(spec, n_out, c_in)))
        return out

    def cost_of(self, keep):
        return sum(self.layer_costs(keep))

    def _keep_with(self, t, r):
        keep = list(self.keep)
        keep[t] = self.groups[t] - r
        for j in range(t + 1, len(keep)):
            keep[j] = self.groups[j] - self.qmax[j]
        return keep

    @property
    def budget(self):
        return (1.0 - self.alpha) * self.w_all

    def feasible(self):
        if self.alpha is None:
            return True
        keep = [g - q for g, q in zip(self.groups, self.qmax)]
        return self.cost_of(keep) <= self.budget + _TOL * self.w_all

    def bound_channels(self, r_raw):
        """Smallest removal count >= ``r_raw`` keeping the budget reachable."""
        t = self.t
        r = min(r_raw, self.qmax[t])
        if self.alpha is None:
            return r
        self.duty_calls += 1
        limit = self.budget + _TOL * self.w_all
        while r < self.qmax[t] and self.cost_of(self._keep_with(t, r)) > limit:
            r += 1
        if self.cost_of(self._keep_with(t, r)) > limit:
            raise InfeasibleBudget(f"layer {t} cannot meet the budget even at maximal pruning")
        return r

    def commit(self, r):
        self.keep[self.t] = self.groups[self.t] - r
        self.t += 1

    @property
    def current_cost(self):
        return self.cost_of(self.keep)

    @property
    def w_reduced(self):
        return self.w_all - self.current_cost

    @property
    def w_rest(self):
        return float(sum(self.layer_costs(self.keep)[self.t + 1:]))

    def reduced_fraction(self):
        return self.w_reduced / self.w_all


# ---------------------------------------------------------------------------
# rewards


@dataclass(frozen=True)
class RewardSpec:
    kind: str = "r_err"

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward {self.kind!r}")


@dataclass
class EpisodeOutcome:
    actions: list
    raw_actions: list
    val_acc: float
    cost: object
    reward: float
    net: object = field(repr=False, default=None)

    @property
    def cost_ratio(self):
        return self.cost.ratio_vs_baseline


def reward_value(val_acc, flops, params, kind):
    error = 1.0 - val_acc
    if kind == "r_err":
        return -error
    size = flops if kind == "r_flops" else params
    if size <= 1:
        raise ValueError(f"log reward needs a resource count > 1, got {size}")
    return -error * math.log(size)


def reward(outcome, spec):
    """Terminal reward from the pruned model's validation accuracy and size."""
    totals = outcome.cost.totals
    return reward_value(outcome.val_acc, totals["flops"], totals["params"], spec.kind)


# ---------------------------------------------------------------------------
# environment


class CompressionEnv:
    """Prune ``net`` layer by layer.

    ``reference`` is the dense network that budgets and cost ratios are
    measured against (defaults to ``net``); pass the original model when
    ``net`` already carries masks from an earlier stage.
    """

    def __init__(self, net, val, cost_model=None, prune="channel", alpha=None, a_max=0.8,
                 a_max_dense=None, reward_spec=None, reference=None, reward_subset=None,
                 subset_seed=0, state_mask=None):
        if prune not in PRUNE_KINDS:
            raise ValueError(f"unknown prune kind {prune!r}")
        self.prune = prune
        self.cost_model = cost_model or CostModel("flops")
        if prune == "fine" and self.cost_model.kind == "latency":
            raise ValueError("latency costs need channel pruning; fine-grained sparsity does not change dense latency")
        self.start = net
        self.reference = reference or net
        self.alpha = None if alpha is None else float(alpha)
        self.a_max = float(a_max)
        self.a_max_dense = (0.98 if prune == "fine" else self.a_max) if a_max_dense is None else float(a_max_dense)
        self.reward_spec = reward_spec or RewardSpec("r_err")
        if reward_subset and reward_subset < len(val):
            idx = np.sort(np.random.default_rng(subset_seed).choice(len(val), reward_subset, replace=False))
            val = val.subset(idx)
        self.val = val
        mask = np.ones(len(FEATURES)) if state_mask is None else np.asarray(state_mask, dtype=float)
        if mask.shape != (len(FEATURES),):
            raise ValueError("state mask needs 11 entries")
        self.state_mask = mask

        specs = self.reference.specs()
        self.layer_specs = [specs[i] for i in self.reference.weighted_indices]
        self.T = len(self.layer_specs)
        self.base_flops = [compress.layer_flops(s) for s in self.layer_specs]
        self.baseline_cost = model_cost(self.reference, self.cost_model)
        self._static = self._static_features()
        self._orders = ([compress.magnitude_order(l.effective_weight()) for l in self.start.weighted_layers]
                        if prune == "fine" else None)
        self._max = self._static.max(axis=0)
        self._max[self._max == 0] = 1.0
        self._check_feasible()
        self.net = None
        self.done = True

    # -- setup ----------------------------------------------------------------

    def _layer_cap(self, pos):
        return self.a_max_dense if self.layer_specs[pos].kind == "dense" else self.a_max

    def _new_tracker(self):
        if self.prune == "channel":
            return ChannelBudget(self.reference, self.cost_model, self.alpha, self.a_max)
        sizes = [s.weight_count for s in self.layer_specs]
        units = [1 if self.cost_model.kind == "params" or s.kind == "dense" else s.out_h * s.out_w
                 for s in self.layer_specs]
        self._sizes, self._units = sizes, units
        self._qmax = [int(math.floor(self._layer_cap(p) * n + 1e-9)) for p, n in enumerate(sizes)]
        caps = [q / n for q, n in zip(self._qmax, sizes)]
        return BudgetTracker([n * u for n, u in zip(sizes, units)], self.alpha, caps)

    def _check_feasible(self):
        tracker = self._new_tracker()
        if not tracker.feasible():
            raise InfeasibleBudget(f"alpha={self.alpha} cannot be met with a_max={self.a_max}")
        if self.prune == "fine":
            for pos, layer in enumerate(self.start.weighted_layers):
                zeros = layer.weight.size - int(np.count_nonzero(layer.effective_weight()))
                if zeros > self._qmax[pos]:
                    raise InfeasibleBudget(f"layer {pos} is already sparser than its a_max cap")

    def _static_features(self):
        rows = []
        for t, s in enumerate(self.layer_specs):
            h, w, stride, k = (1, 1, 1, 1) if s.kind == "dense" else (s.input_h, s.input_w, s.stride, s.k)
            rows.append([t, s.n, s.c, h, w, stride, k, self.base_flops[t]])
        return np.asarray(rows, dtype=float)

    # -- episode --------------------------------------------------------------

    def embed(self, t, a_prev):
        """Normalized 11-feature state of layer ``t``."""
        static = self._static[t] / self._max
        w_all = self.tracker.w_all
        dynamic = [self.tracker.w_reduced / w_all, self.tracker.w_rest / w_all, a_prev]
        state = np.concatenate([static, dynamic])
        return np.clip(state, 0.0, 1.0) * self.state_mask

    def reset(self):
        self.net = self.start.copy()
        self.tracker = self._new_tracker()
        self.t = 0
        self.actions = []
        self.raw_actions = []
        self.done = False
        self.state = self.embed(0, 0.0)
        return self.state

    def _fine_step(self, raw):
        t = self.t
        n = self._sizes[t]
        cap = self._qmax[t] / n
        layer = self.net.weighted_layers[t]
        zeros = n - int(np.count_nonzero(layer.effective_weight()))
        m = int(math.floor(min(raw, cap) * n + 1e-9))
        if self.alpha is not None:
            # ceil on the duty share so quantization never undercuts the budget
            lower = self.tracker.duty() / self.tracker.costs[t]
            if lower > cap + _TOL:
                raise InfeasibleBudget(f"layer {t} must remove {lower:.4f} > a_max {cap}")
            m = max(m, int(math.ceil(lower * n - 1e-9)))
        m = min(max(m, zeros), self._qmax[t])
        # layer t is untouched until its own step, so the start net's order holds
        compress.apply_fine_grained(self.net, t, m, self._orders[t])
        self.tracker.commit(m * self._units[t])
        return m / n

    def _channel_step(self, raw):
        t = self.t
        tracker = self.tracker
        if t == 0:
            tracker.commit(0)
            return 0.0
        groups = tracker.groups[t]
        r_raw = compress.channels_to_remove(min(raw, self.a_max), groups)
        r = tracker.bound_channels(r_raw)
        compress.remove_lowest_channels(self.net, t, r)
        tracker.commit(r)
        return r / groups

    def step(self, action):
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        raw = float(np.clip(action, 0.0, 1.0))
        realized = self._fine_step(raw) if self.prune == "fine" else self._channel_step(raw)
        self.raw_actions.append(raw)
        self.actions.append(realized)
        self.t += 1
        if self.t == self.T:
            self.done = True
            self.state = np.zeros(len(FEATURES))
        else:
            self.state = self.embed(self.t, realized)
        return self.state, self.done

    def outcome(self):
        """Score the finished episode: validation accuracy of the pruned, un-fine-tuned net."""
        if not self.done or self.net is None:
            raise RuntimeError("episode not finished")
        cost = model_cost(self.net, self.cost_model, baseline=self.reference)
        acc = evaluate(self.net, self.val)
        out = EpisodeOutcome(list(self.actions), list(self.raw_actions), acc, cost, 0.0, self.net)
        out.reward = reward(out, self.reward_spec)
        return out

    def run_policy(self, actions):
        self.reset()
        for a in actions:
            self.step(a)
        return self.outcome()
