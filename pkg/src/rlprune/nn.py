"""A small numpy network framework: conv/dense/relu/maxpool/flatten layers,
reverse-mode gradients, plain SGD training and a versioned weight format.

Layer ``forward`` calls are pure (they return a cache instead of storing
one), so inference over disjoint batches can run concurrently against the
same weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._io import atomic_write_bytes
from .errors import FormatError, NumericError, ShapeError

WEIGHT_MAGIC = b"AMCW"
WEIGHT_VERSION = 1

DEFAULT_DTYPE = np.float32


def conv_output_size(size, k, stride):
    """Valid (unpadded) convolution output length."""
    if size < k:
        raise ShapeError(f"input size {size} smaller than kernel {k}")
    return (size - k) // stride + 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n: int
    c: int
    k: int = 1
    stride: int = 1
    input_h: int = 1
    input_w: int = 1

    @property
    def weighted(self):
        return self.kind in ("conv2d", "dense")

    @property
    def out_h(self):
        if self.kind == "conv2d":
            return conv_output_size(self.input_h, self.k, self.stride)
        if self.kind == "maxpool":
            return self.input_h // self.k
        return 1 if self.kind in ("dense", "flatten") else self.input_h

    @property
    def out_w(self):
        if self.kind == "conv2d":
            return conv_output_size(self.input_w, self.k, self.stride)
        if self.kind == "maxpool":
            return self.input_w // self.k
        return 1 if self.kind in ("dense", "flatten") else self.input_w

    @property
    def weight_count(self):
        return self.n * self.c * self.k * self.k if self.weighted else 0


# ---------------------------------------------------------------------------
# layers


class Conv2D:
    kind = "conv2d"

    def __init__(self, n, c, k, stride=1, weight=None, bias=None, dtype=DEFAULT_DTYPE):
        if stride < 1:
            raise ShapeError("stride must be >= 1")
        self.stride = int(stride)
        self.weight = np.zeros((n, c, k, k), dtype) if weight is None else np.asarray(weight)
        self.bias = np.zeros(n, self.weight.dtype) if bias is None else np.asarray(bias)
        self.mask = None

    n = property(lambda self: self.weight.shape[0])
    c = property(lambda self: self.weight.shape[1])
    k = property(lambda self: self.weight.shape[2])

    def effective_weight(self):
        return self.weight if self.mask is None else self.weight * self.mask

    def _windows(self, x):
        win = sliding_window_view(x, (self.k, self.k), axis=(2, 3))
        s = self.stride
        return win[:, :, ::s, ::s]  # (B, C, oh, ow, k, k)

    def forward(self, x):
        win = self._windows(x)
        out = np.tensordot(win, self.effective_weight(), axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.bias[None, :, None, None]
        return np.ascontiguousarray(out), (x.shape, win)

    def backward(self, dout, cache):
        x_shape, win = cache
        dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
        db = dout.sum(axis=(0, 2, 3))
        w = self.effective_weight()
        dx = np.zeros(x_shape, dout.dtype)
        s = self.stride
        oh, ow = dout.shape[2], dout.shape[3]
        for i in range(self.k):
            for j in range(self.k):
                contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))
                dx[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        if self.mask is not None:
            dw = dw * self.mask
        return dx, (dw, db)

    def params(self):
        return [self.weight, self.bias]


class Dense:
    kind = "dense"

    def __init__(self, n, c, weight=None, bias=None, dtype=DEFAULT_DTYPE):
        self.weight = np.zeros((n, c), dtype) if weight is None else np.asarray(weight)
        self.bias = np.zeros(n, self.weight.dtype) if bias is None else np.asarray(bias)
        self.mask = None
        self.stride = 1

    n = property(lambda self: self.weight.shape[0])
    c = property(lambda self: self.weight.shape[1])
    k = 1

    def effective_weight(self):
        return self.weight if self.mask is None else self.weight * self.mask

    def forward(self, x):
        return x @ self.effective_weight().T + self.bias, x

    def backward(self, dout, x):
        dw = dout.T @ x
        if self.mask is not None:
            dw = dw * self.mask
        return dout @ self.effective_weight(), (dw, dout.sum(axis=0))

    def params(self):
        return [self.weight, self.bias]


class ReLU:
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0), x > 0

    def backward(self, dout, positive):
        return dout * positive, ()

    def params(self):
        return []


class MaxPool:
    kind = "maxpool"

    def __init__(self, size=2):
        self.size = int(size)

    def forward(self, x):
        b, c, h, w = x.shape
        p = self.size
        oh, ow = h // p, w // p
        xr = x[:, :, :oh * p, :ow * p].reshape(b, c, oh, p, ow, p).transpose(0, 1, 2, 4, 3, 5)
        xr = xr.reshape(b, c, oh, ow, p * p)
        arg = xr.argmax(axis=-1)
        out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, dout, cache):
        (b, c, h, w), arg = cache
        p = self.size
        oh, ow = dout.shape[2], dout.shape[3]
        grid = np.zeros((b, c, oh, ow, p * p), dout.dtype)
        np.put_along_axis(grid, arg[..., None], dout[..., None], axis=-1)
        grid = grid.reshape(b, c, oh, ow, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh * p, ow * p)
        dx = np.zeros((b, c, h, w), dout.dtype)
        dx[:, :, :oh * p, :ow * p] = grid
        return dx, ()

    def params(self):
        return []


class Flatten:
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), ()

    def params(self):
        return []


# ---------------------------------------------------------------------------
# network


class Network:
    """Ordered stack of layers with a fixed ``(c, h, w)`` input shape."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self._specs = None
        self.specs()

    def specs(self):
        """Resolve every layer's :class:`LayerSpec`, checking shape consistency."""
        if self._specs is not None:
            return self._specs
        c, h, w = self.input_shape
        flat = False
        specs = []
        for i, layer in enumerate(self.layers):
            kind = layer.kind
            if kind == "conv2d":
                if flat:
                    raise ShapeError(f"layer {i}: conv2d after flatten", layer=i)
                if layer.c != c:
                    raise ShapeError(f"layer {i}: conv2d expects {layer.c} input channels, got {c}", layer=i)
                if h < layer.k or w < layer.k:
                    raise ShapeError(f"layer {i}: input {h}x{w} smaller than kernel {layer.k}", layer=i)
                spec = LayerSpec("conv2d", layer.n, layer.c, layer.k, layer.stride, h, w)
                c, h, w = layer.n, spec.out_h, spec.out_w
            elif kind == "dense":
                features = c * h * w
                if not flat and (h, w) != (1, 1):
                    raise ShapeError(f"layer {i}: dense layer needs flattened input", layer=i)
                if layer.c != features:
                    raise ShapeError(f"layer {i}: dense expects {layer.c} inputs, got {features}", layer=i)
                spec = LayerSpec("dense", layer.n, layer.c)
                c, h, w, flat = layer.n, 1, 1, True
            elif kind == "maxpool":
                spec = LayerSpec("maxpool", c, c, layer.size, layer.size, h, w)
                h, w = spec.out_h, spec.out_w
                if h < 1 or w < 1:
                    raise ShapeError(f"layer {i}: maxpool collapses spatial dims", layer=i)
            elif kind == "flatten":
                spec = LayerSpec("flatten", c * h * w, c, 1, 1, h, w)
                c, h, w, flat = c * h * w, 1, 1, True
            else:
                spec = LayerSpec(kind, c, c, 1, 1, h, w)
            specs.append(spec)
        self._specs = specs
        return specs

    def invalidate(self):
        """Call after changing layer shapes in place."""
        self._specs = None
        self.specs()

    @property
    def weighted_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind in ("conv2d", "dense")]

    @property
    def weighted_layers(self):
        return [self.layers[i] for i in self.weighted_indices]

    @property
    def num_classes(self):
        return self.weighted_layers[-1].n

    @property
    def dtype(self):
        return self.weighted_layers[0].weight.dtype

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"layer 0: batch shape {x.shape[1:]} does not match input {self.input_shape}", layer=0)

    def forward(self, x):
        """Logits for a ``(B, c, h, w)`` batch. No state is mutated."""
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        for layer in self.layers:
            x, _ = layer.forward(x)
        return x

    def forward_train(self, x):
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, dout, caches):
        """Return per-layer gradient tuples (empty for weightless layers)."""
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dout, grads[i] = self.layers[i].backward(dout, caches[i])
        return grads

    def copy(self):
        layers = []
        for layer in self.layers:
            if layer.kind == "conv2d":
                new = Conv2D(layer.n, layer.c, layer.k, layer.stride, layer.weight.copy(), layer.bias.copy())
            elif layer.kind == "dense":
                new = Dense(layer.n, layer.c, layer.weight.copy(), layer.bias.copy())
            elif layer.kind == "maxpool":
                new = MaxPool(layer.size)
            else:
                new = type(layer)()
            if getattr(layer, "mask", None) is not None:
                new.mask = layer.mask.copy()
            layers.append(new)
        return Network(layers, self.input_shape)

    def astype(self, dtype):
        net = self.copy()
        for layer in net.weighted_layers:
            layer.weight = layer.weight.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
            if layer.mask is not None:
                layer.mask = layer.mask.astype(dtype)
        return net

    def apply_masks(self):
        for layer in self.weighted_layers:
            if layer.mask is not None:
                layer.weight *= layer.mask

    def parameter_arrays(self):
        return [(layer.weight, layer.bias) for layer in self.weighted_layers]


def init_network(net, seed):
    """He-normal weights, zero biases. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    for layer in net.weighted_layers:
        fan_in = layer.c * layer.k * layer.k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=layer.weight.shape)
        layer.weight = w.astype(layer.weight.dtype)
        layer.bias = np.zeros_like(layer.bias)
        layer.mask = None
    return net


def toy_convnet(input_shape=(1, 16, 16), num_classes=10, widths=(8, 16, 16, 32), hidden=64, seed=0):
    """Six weighted layers: four 3x3 convs (two pooling stages) and two dense layers."""
    c, h, w = input_shape
    w1, w2, w3, w4 = widths
    layers = [
        Conv2D(w1, c, 3), ReLU(),
        Conv2D(w2, w1, 3), ReLU(), MaxPool(2),
        Conv2D(w3, w2, 3), ReLU(),
        Conv2D(w4, w3, 3), ReLU(), MaxPool(2),
        Flatten(),
    ]
    probe = Network(layers, input_shape)
    features = probe.specs()[-1].n
    layers += [Dense(hidden, features), ReLU(), Dense(num_classes, hidden)]
    return init_network(Network(layers, input_shape), seed)


# ---------------------------------------------------------------------------
# losses, training, evaluation


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


def _first_nonfinite_layer(net, x):
    x = np.asarray(x, dtype=net.dtype)
    for i, layer in enumerate(net.layers):
        x, _ = layer.forward(x)
        if not np.all(np.isfinite(x)):
            return i
    return None


def train_epoch(net, train, lr, batch_size=32, seed=0):
    """One epoch of plain SGD on softmax cross-entropy; returns the mean loss.

    Masked weights stay at zero: their gradients are masked and the mask is
    reapplied after every step.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    images, labels = train.images, train.labels
    order = np.random.default_rng(seed).permutation(len(labels))
    total, count = 0.0, 0
    for bi, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start:start + batch_size]
        x, y = images[idx], labels[idx]
        logits, caches = net.forward_train(x)
        loss, dlogits = softmax_cross_entropy(logits, y)
        if not np.isfinite(loss):
            layer = _first_nonfinite_layer(net, x)
            raise NumericError(f"non-finite loss at batch {bi} (first bad layer: {layer})", layer=layer, batch=bi)
        grads = net.backward(dlogits.astype(net.dtype), caches)
        if lr > 0:
            for layer, g in zip(net.layers, grads):
                if layer.kind in ("conv2d", "dense"):
                    dw, db = g
                    layer.weight -= (lr * dw).astype(layer.weight.dtype)
                    layer.bias -= (lr * db).astype(layer.bias.dtype)
                    if layer.mask is not None:
                        layer.weight *= layer.mask
        total += loss * len(idx)
        count += len(idx)
    return total / count


_EVAL_THREADS = 1


def set_eval_threads(n):
    """Number of worker threads ``predict`` may use over disjoint batches."""
    global _EVAL_THREADS
    if int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _EVAL_THREADS = int(n)


def predict(net, images, batch_size=256):
    starts = range(0, len(images), batch_size)
    run = lambda start: net.forward(images[start:start + batch_size]).argmax(axis=1)
    if _EVAL_THREADS > 1 and len(starts) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(min(_EVAL_THREADS, len(starts))) as pool:
            out = list(pool.map(run, starts))
    else:
        out = [run(start) for start in starts]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def evaluate(net, data, batch_size=256):
    """Top-1 accuracy in [0, 1]."""
    if len(data.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(net, data.images, batch_size)
    return float(np.count_nonzero(pred == data.labels)) / len(data.labels)


def _loss_and_grads(net, x, y, loss):
    out, caches = net.forward_train(x)
    if loss == "quadratic":
        value = 0.5 * float(np.sum(out * out)) / out.shape[0]
        dout = out / out.shape[0]
    else:
        value, dout = softmax_cross_entropy(out, y)
    return value, net.backward(dout, caches), caches


def _kink_pattern(net, caches):
    """Active ReLU units and max-pool winners; the loss is smooth while these hold."""
    parts = []
    for layer, cache in zip(net.layers, caches):
        if layer.kind == "relu":
            parts.append(cache)
        elif layer.kind == "maxpool":
            parts.append(cache[1])
    return parts


def _same_pattern(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def gradient_check(net, batch, epsilon=1e-4, labels=None, loss="xent", num_checks=40, seed=0):
    """Worst relative error between backprop and central finite differences.

    The check runs in float64 on a copy of ``net``, over ``num_checks`` random
    entries of every weight and bias array. ``loss`` is ``"xent"`` (needs
    ``labels``) or ``"quadratic"`` (half mean squared output norm). Entries
    whose +-epsilon probes flip a ReLU or max-pool decision are skipped, since
    the loss is not differentiable across such a kink.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    net64 = net.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)
    y = None if labels is None else np.asarray(labels)
    if loss == "xent" and y is None:
        raise ValueError("cross-entropy check needs labels")
    _, grads, caches = _loss_and_grads(net64, x, y, loss)
    pattern = _kink_pattern(net64, caches)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for layer, g in zip(net64.layers, grads):
        if layer.kind not in ("conv2d", "dense"):
            continue
        for arr, garr in zip(layer.params(), g):
            flat, gflat = arr.reshape(-1), garr.reshape(-1)
            picks = rng.choice(flat.size, size=min(num_checks, flat.size), replace=False)
            for p in picks:
                if layer.mask is not None and arr is layer.weight and layer.mask.reshape(-1)[p] == 0:
                    continue
                old = flat[p]
                flat[p] = old + epsilon
                up, _, c_up = _loss_and_grads(net64, x, y, loss)
                flat[p] = old - epsilon
                down, _, c_down = _loss_and_grads(net64, x, y, loss)
                flat[p] = old
                if not (_same_pattern(pattern, _kink_pattern(net64, c_up))
                        and _same_pattern(pattern, _kink_pattern(net64, c_down))):
                    continue
                numeric = (up - down) / (2 * epsilon)
                analytic = gflat[p]
                denom = max(abs(numeric) + abs(analytic), 1e-8)
                worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# ---------------------------------------------------------------------------
# weight file


def weights_to_bytes(net):
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(net.weighted_indices))]
    for layer in net.weighted_layers:
        dims = (layer.n, layer.c, layer.k, layer.k)
        parts.append(struct.pack("<4I", *dims))
        parts.append(np.ascontiguousarray(layer.effective_weight(), dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def save_weights(net, path):
    atomic_write_bytes(path, weights_to_bytes(net))


def read_weight_arrays(buf, offset=0):
    """Parse a weight container; returns ``([(dims, weight, bias), ...], end_offset)``."""
    if buf[offset:offset + 4] != WEIGHT_MAGIC:
        raise FormatError("bad magic: not a weight file")
    if len(buf) < offset + 12:
        raise FormatError("truncated weight header")
    version, count = struct.unpack_from("<II", buf, offset + 4)
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    pos = offset + 12
    out = []
    for i in range(count):
        if len(buf) < pos + 16:
            raise FormatError(f"truncated weight file at layer {i}")
        dims = struct.unpack_from("<4I", buf, pos)
        pos += 16
        nw = dims[0] * dims[1] * dims[2] * dims[3]
        need = 4 * (nw + dims[0])
        if len(buf) < pos + need:
            raise FormatError(f"truncated weight file at layer {i}")
        w = np.frombuffer(buf, dtype="<f4", count=nw, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * nw
        b = np.frombuffer(buf, dtype="<f4", count=dims[0], offset=pos).astype(np.float32)
        pos += 4 * dims[0]
        out.append((dims, w, b))
    return out, pos


def load_weights(path, template, allow_resize=False):
    """Load a weight file into a copy of ``template``.

    Shapes must match the template exactly unless ``allow_resize`` is set, in
    which case channel counts may differ (channel-pruned checkpoints) as long
    as the resulting network is self-consistent. Zero weights become masked
    entries so fine-grained sparsity survives fine-tuning.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    arrays, _ = read_weight_arrays(buf)
    return assign_weights(template, arrays, allow_resize)


def assign_weights(template, arrays, allow_resize=False):
    net = template.copy()
    idx = net.weighted_indices
    if len(arrays) != len(idx):
        raise ShapeError(f"weight file has {len(arrays)} weighted layers, network has {len(idx)}")
    for li, (dims, w, b) in zip(idx, arrays):
        layer = net.layers[li]
        expected = (layer.n, layer.c, layer.k, layer.k)
        if tuple(dims) != expected and not (allow_resize and dims[2:] == expected[2:]):
            raise ShapeError(f"layer {li}: file shape {tuple(dims)} != expected {expected}", layer=li)
        layer.weight = w if layer.kind == "conv2d" else w.reshape(dims[0], dims[1])
        layer.bias = b
        zeros = layer.weight == 0
        layer.mask = (~zeros).astype(layer.weight.dtype) if zeros.any() else None
    net.invalidate()
    return net


def load_toy_convnet(path, input_shape):
    """Rebuild a :func:`toy_convnet` (possibly channel-pruned) from its weight file.

    The architecture is implied by the stored layer dims: four convs give the
    widths and the first dense layer gives the hidden size.
    """
    with open(path, "rb") as fh:
        arrays, _ = read_weight_arrays(fh.read())
    kinds = [(dims[2], dims[3]) for dims, _, _ in arrays]
    if len(arrays) != 6 or any(k != (3, 3) for k in kinds[:4]) or any(k != (1, 1) for k in kinds[4:]):
        raise FormatError(f"{path}: not a six-layer toy convnet checkpoint")
    widths = tuple(int(dims[0]) for dims, _, _ in arrays[:4])
    hidden, classes = int(arrays[4][0][0]), int(arrays[5][0][0])
    if arrays[0][0][1] != input_shape[0]:
        raise ShapeError(f"checkpoint expects {arrays[0][0][1]} input channels, data has {input_shape[0]}", layer=0)
    template = toy_convnet(tuple(input_shape), classes, widths, hidden, seed=0)
    return assign_weights(template, arrays)
