"""Pruning operators and resource accounting.

Ratios everywhere mean the fraction REMOVED: a fine-grained ratio is the
fraction of a layer's weights zeroed, a channel ratio is the fraction of its
input channels cut. One multiply-accumulate counts as one FLOP. Biases are
never pruned and never counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._io import atomic_write_text
from .errors import ConfigError, ShapeError
from .nn import LayerSpec

COST_KINDS = ("params", "flops", "latency")


# ---------------------------------------------------------------------------
# counting


def layer_params(spec):
    return spec.n * spec.c * spec.k * spec.k


def layer_flops(spec):
    """MACs of one conv2d/dense layer for a single input sample."""
    if spec.kind == "dense":
        return spec.n * spec.c
    if spec.kind != "conv2d":
        raise ValueError(f"{spec.kind} layers carry no weights")
    if not spec.input_h or not spec.input_w or spec.input_h < 1 or spec.input_w < 1:
        raise ShapeError("conv2d input spatial dims are unresolved")
    return spec.n * spec.c * spec.k * spec.k * spec.out_h * spec.out_w


def _nonzero_weights(layer):
    return int(np.count_nonzero(layer.effective_weight()))


def round_half_up(x):
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# fine-grained pruning


def magnitude_order(weights):
    """Flat indices by increasing |w|; ties go to the lower flat index."""
    return np.argsort(np.abs(np.asarray(weights)).reshape(-1), kind="stable")


def magnitude_mask(weights, num_removed, order=None):
    """Mask zeroing the ``num_removed`` smallest-|w| entries; ties go to the lower flat index.

    ``order`` may pass a precomputed :func:`magnitude_order` of ``weights``.
    """
    flat = np.asarray(weights).reshape(-1)
    num_removed = int(num_removed)
    if not 0 <= num_removed <= flat.size:
        raise ValueError("num_removed out of range")
    if order is None:
        order = magnitude_order(flat)
    mask = np.ones(flat.size, dtype=np.asarray(weights).dtype)
    mask[order[:num_removed]] = 0
    return mask.reshape(np.shape(weights))


def fine_grained_count(ratio, size):
    # guards against ratio = m/N landing a hair under m after the multiply
    return int(math.floor(ratio * size + 1e-9))


def prune_fine_grained(weights, ratio_removed):
    """0/1 mask removing ``floor(ratio * N)`` least-magnitude weights."""
    if not 0 <= ratio_removed < 1:
        raise ValueError("ratio_removed must lie in [0, 1)")
    w = np.asarray(weights)
    return magnitude_mask(w, fine_grained_count(ratio_removed, w.size))


def apply_fine_grained(net, weighted_pos, num_removed, order=None):
    """Mask the layer at ``weighted_pos`` (position among weighted layers) in place.

    Weights already masked carry magnitude zero, so they are always re-selected
    first and masks only ever grow. ``order`` is an optional precomputed
    :func:`magnitude_order` of the layer's effective weights.
    """
    layer = net.weighted_layers[weighted_pos]
    mask = magnitude_mask(layer.effective_weight(), num_removed, order)
    if layer.mask is not None:
        mask = mask * layer.mask
    layer.mask = mask
    layer.weight = layer.weight * mask
    return layer


def sparsity_of(x):
    """Fraction of zero entries of an array, mask, or a whole network's weights."""
    if hasattr(x, "weighted_layers"):
        zeros = sum(l.effective_weight().size - _nonzero_weights(l) for l in x.weighted_layers)
        total = sum(l.weight.size for l in x.weighted_layers)
        return zeros / total
    a = np.asarray(x)
    return float(a.size - np.count_nonzero(a)) / a.size


def channel_sparsity(net, baseline):
    """Per-weighted-layer ``1 - c'/c`` relative to the unpruned ``baseline``."""
    out = []
    for pos, (layer, base) in enumerate(zip(net.weighted_layers, baseline.weighted_layers)):
        groups, _ = input_groups(net, pos)
        base_groups, _ = input_groups(baseline, pos)
        out.append(1.0 - groups / base_groups)
    return out


# ---------------------------------------------------------------------------
# channel pruning


def input_groups(net, weighted_pos):
    """(number of input channels, features per channel) of a weighted layer.

    A dense layer fed by a flatten sees each upstream channel as a contiguous
    block of ``h * w`` features; that block is one prunable channel.
    """
    li = net.weighted_indices[weighted_pos]
    layer = net.layers[li]
    if layer.kind == "conv2d":
        return layer.c, 1
    specs = net.specs()
    for j in range(li - 1, -1, -1):
        if specs[j].kind == "flatten":
            channels = specs[j].c
            return channels, layer.c // channels
        if specs[j].weighted:
            break
    return layer.c, 1


def predecessor(net, weighted_pos):
    """Position of the weighted layer producing this layer's input channels, or None."""
    return weighted_pos - 1 if weighted_pos > 0 else None


def channel_scores(net, weighted_pos):
    """Max-response score of each input channel: sum of |w| over everything reading it."""
    layer = net.weighted_layers[weighted_pos]
    w = np.abs(layer.effective_weight())
    if layer.kind == "conv2d":
        return w.sum(axis=(0, 2, 3))
    groups, size = input_groups(net, weighted_pos)
    return w.reshape(layer.n, groups, size).sum(axis=(0, 2))


def channels_to_remove(ratio, channels, round_up=False):
    r = math.ceil(ratio * channels - 1e-9) if round_up else round_half_up(ratio * channels)
    return max(0, min(r, channels - 1))


def remove_input_channels(net, weighted_pos, remove):
    """Cut the given input channels of a layer and the matching filters upstream. In place."""
    remove = np.asarray(sorted(set(int(i) for i in remove)), dtype=int)
    if remove.size == 0:
        return net
    pred = predecessor(net, weighted_pos)
    if pred is None:
        raise ValueError("the first weighted layer reads raw image channels and cannot be channel-pruned")
    layer = net.weighted_layers[weighted_pos]
    groups, size = input_groups(net, weighted_pos)
    keep = np.setdiff1d(np.arange(groups), remove)
    if keep.size == 0:
        raise ValueError("at least one channel must survive")
    if layer.kind == "conv2d":
        layer.weight = layer.weight[:, keep]
        if layer.mask is not None:
            layer.mask = layer.mask[:, keep]
    else:
        cols = (keep[:, None] * size + np.arange(size)[None, :]).reshape(-1)
        layer.weight = layer.weight[:, cols]
        if layer.mask is not None:
            layer.mask = layer.mask[:, cols]
    up = net.weighted_layers[pred]
    up.weight = up.weight[keep]
    up.bias = up.bias[keep]
    if up.mask is not None:
        up.mask = up.mask[keep]
    net.invalidate()
    return net


def prune_channels(net, layer_index, ratio_removed, a_max=0.8, round_up=False, copy=True):
    """Remove ``round(ratio * c)`` lowest-response input channels of ``net.layers[layer_index]``.

    Returns ``(net, realized_ratio)``. The producing layer loses the matching
    output filters. The first weighted layer is left alone (realized ratio 0).
    """
    if ratio_removed > a_max + 1e-12:
        raise ValueError(f"ratio {ratio_removed} exceeds a_max {a_max}")
    if ratio_removed < 0:
        raise ValueError("ratio_removed must be non-negative")
    pos = net.weighted_indices.index(layer_index)
    if copy:
        net = net.copy()
    groups, _ = input_groups(net, pos)
    if pos == 0:
        return net, 0.0
    r = channels_to_remove(ratio_removed, groups, round_up)
    if r == 0:
        return net, 0.0
    order = np.argsort(channel_scores(net, pos), kind="stable")
    remove_input_channels(net, pos, order[:r])
    return net, r / groups


def remove_lowest_channels(net, weighted_pos, count):
    """In-place variant taking an exact channel count."""
    if count <= 0 or weighted_pos == 0:
        return net
    order = np.argsort(channel_scores(net, weighted_pos), kind="stable")
    return remove_input_channels(net, weighted_pos, order[:count])


def zero_channels_equivalent(net, weighted_pos, remove):
    """Same-shape network with the given input channels (and upstream filters) zeroed.

    Reference for cascade conservation: must compute exactly what the
    channel-removed network computes.
    """
    out = net.copy()
    layer = out.weighted_layers[weighted_pos]
    groups, size = input_groups(out, weighted_pos)
    remove = np.asarray(list(remove), dtype=int)
    if layer.kind == "conv2d":
        layer.weight[:, remove] = 0
    else:
        cols = (remove[:, None] * size + np.arange(size)[None, :]).reshape(-1)
        layer.weight[:, cols] = 0
    up = out.weighted_layers[weighted_pos - 1]
    up.weight[remove] = 0
    up.bias[remove] = 0
    return out


# ---------------------------------------------------------------------------
# cost models


def shape_signature(spec):
    return (spec.kind, spec.n, spec.c, spec.k, spec.out_h, spec.out_w, spec.stride)


@dataclass
class LatencyTable:
    """Microseconds per layer keyed by ``(kind, n, c, k, out_h, out_w, stride)``."""

    entries: dict = field(default_factory=dict)

    def lookup(self, spec):
        sig = shape_signature(spec)
        try:
            return self.entries[sig]
        except KeyError:
            raise KeyError(f"latency table has no entry for {','.join(map(str, sig))}") from None

    def missing(self, specs):
        return [shape_signature(s) for s in specs if shape_signature(s) not in self.entries]

    def to_text(self):
        rows = ["# kind,n,c,k,oh,ow,stride,micros"]
        for sig in sorted(self.entries):
            kind = "conv" if sig[0] == "conv2d" else sig[0]
            rows.append(",".join([kind] + [str(v) for v in sig[1:]]) + f",{self.entries[sig]!r}")
        return "\n".join(rows) + "\n"

    def save(self, path):
        atomic_write_text(path, self.to_text())

    @classmethod
    def from_text(cls, text):
        entries = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"latency table line {lineno}: expected 8 fields")
            kind = parts[0]
            if kind not in ("conv", "conv2d", "dense"):
                raise ValueError(f"latency table line {lineno}: unknown layer kind {kind!r}")
            kind = "conv2d" if kind == "conv" else kind
            ints = tuple(int(v) for v in parts[1:7])
            micros = float(parts[7])
            if micros <= 0:
                raise ValueError(f"latency table line {lineno}: latency must be positive")
            entries[(kind,) + ints] = micros
        return cls(entries)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


@dataclass
class CostModel:
    kind: str = "flops"
    latency_table: LatencyTable | None = None

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ConfigError(f"unknown cost kind {self.kind!r}")
        if self.kind == "latency" and self.latency_table is None:
            raise ConfigError("latency cost model needs a latency table")

    @classmethod
    def parse(cls, text):
        """``params``, ``flops`` or ``latency:<path>``."""
        if text.startswith("latency:"):
            return cls("latency", LatencyTable.load(text.split(":", 1)[1]))
        return cls(text)

    def layer_cost(self, spec, nonzero=None):
        """Cost of one layer; ``nonzero`` overrides the dense weight count (fine-grained masks)."""
        if self.kind == "latency":
            return self.latency_table.lookup(spec)
        params = layer_params(spec) if nonzero is None else nonzero
        if self.kind == "params":
            return params
        if spec.kind == "dense":
            return params
        return params * spec.out_h * spec.out_w


@dataclass
class LayerCost:
    index: int
    params: int
    flops: int
    latency: float | None = None


@dataclass
class CostReport:
    kind: str
    per_layer: list
    totals: dict
    ratio_vs_baseline: float

    @property
    def total(self):
        return self.totals[self.kind]

    def to_dict(self):
        return {
            "kind": self.kind,
            "convention": "1 MAC = 1 FLOP; biases excluded",
            "per_layer": [vars(c) for c in self.per_layer],
            "totals": self.totals,
            "ratio_vs_baseline": self.ratio_vs_baseline,
        }


def _layer_costs(net, cost_model):
    specs = net.specs()
    if cost_model.kind == "latency":
        weighted = [specs[i] for i in net.weighted_indices]
        missing = cost_model.latency_table.missing(weighted)
        if missing:
            raise KeyError("latency table misses shapes: " + "; ".join(",".join(map(str, m)) for m in missing))
    rows = []
    for li in net.weighted_indices:
        spec, layer = specs[li], net.layers[li]
        nnz = _nonzero_weights(layer)
        flops = nnz if spec.kind == "dense" else nnz * spec.out_h * spec.out_w
        lat = cost_model.latency_table.lookup(spec) if cost_model.kind == "latency" else None
        rows.append(LayerCost(li, nnz, flops, lat))
    return rows


def model_cost(net, cost_model, baseline=None):
    """Exact per-layer and total cost; ratio against ``baseline`` (defaults to ``net`` itself)."""
    rows = _layer_costs(net, cost_model)
    totals = {"params": sum(r.params for r in rows), "flops": sum(r.flops for r in rows)}
    if cost_model.kind == "latency":
        totals["latency"] = float(sum(r.latency for r in rows))
    base_total = totals[cost_model.kind]
    if baseline is not None:
        base_rows = _layer_costs(baseline, cost_model)
        base_total = sum(getattr(r, cost_model.kind) for r in base_rows)
    return CostReport(cost_model.kind, rows, totals, totals[cost_model.kind] / base_total)


def resized_spec(spec, n=None, c=None):
    return replace(spec, n=spec.n if n is None else n, c=spec.c if c is None else c)


def achievable_specs(net, a_max=0.8):
    """Every weighted-layer shape reachable by channel pruning under ``a_max``."""
    specs = net.specs()
    idx = net.weighted_indices
    in_options = []
    for pos in range(len(idx)):
        groups, size = input_groups(net, pos)
        qmax = 0 if pos == 0 else min(int(math.floor(a_max * groups + 1e-9)), groups - 1)
        in_options.append([(groups - r, size) for r in range(qmax + 1)])
    out = set()
    for pos, li in enumerate(idx):
        outs = [g for g, _ in in_options[pos + 1]] if pos + 1 < len(idx) else [specs[li].n]
        for cin, size in in_options[pos]:
            for nout in outs:
                out.add(resized_spec(specs[li], nout, cin * size))
    return sorted(out, key=shape_signature)


def synthetic_latency_table(net, a_max=0.8, overhead=5.0, per_mac=0.002, per_output=0.01):
    """Deterministic affine latency model over all achievable shapes."""
    entries = {}
    for spec in achievable_specs(net, a_max):
        outputs = spec.n * spec.out_h * spec.out_w
        entries[shape_signature(spec)] = overhead + per_mac * layer_flops(spec) + per_output * outputs
    return LatencyTable(entries)


def benchmark_latency_table(net, a_max=0.8, repeats=20):
    """Wall-clock microbenchmark of every achievable shape with this package's layers."""
    import time

    from .nn import Conv2D, Dense

    rng = np.random.default_rng(0)
    entries = {}
    for spec in achievable_specs(net, a_max):
        if spec.kind == "conv2d":
            layer = Conv2D(spec.n, spec.c, spec.k, spec.stride, rng.normal(size=(spec.n, spec.c, spec.k, spec.k)).astype(np.float32))
            x = rng.normal(size=(1, spec.c, spec.input_h, spec.input_w)).astype(np.float32)
        else:
            layer = Dense(spec.n, spec.c, rng.normal(size=(spec.n, spec.c)).astype(np.float32))
            x = rng.normal(size=(1, spec.c)).astype(np.float32)
        layer.forward(x)
        start = time.perf_counter()
        for _ in range(repeats):
            layer.forward(x)
        entries[shape_signature(spec)] = max((time.perf_counter() - start) / repeats * 1e6, 1e-3)
    return LatencyTable(entries)
