"""Minimal feed-forward network engine with explicit backpropagation.

Supports dense, 1-D convolution, 1-D max pooling, ReLU and softmax layers,
which is enough to express the three reference architectures (single
fully-connected classifier, small 1-D CNN, two-layer perceptron) plus toy
nets for testing. All math runs in float64; lossy quantization is applied
only at the message-exchange boundary (see :mod:`flsim.algorithms`).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR = 1e-12  # probability clamp so -log never sees an exact zero


class ShapeError(ValueError):
    """Raised when tensor shapes do not compose through the network."""


# ---------------------------------------------------------------------------
# Layer specifications and architectures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network.

    kind is one of "dense", "conv1d", "maxpool1d", "relu", "softmax".
    Only dense and conv1d carry trainable parameters.
    """

    kind: str
    in_dim: int = 0        # dense
    out_dim: int = 0       # dense
    taps: int = 0          # conv1d kernel length
    filters: int = 0       # conv1d output channels
    pool: int = 0          # maxpool1d window
    stride: int = 0        # maxpool1d step
    padding: str = "valid"  # conv1d / maxpool1d: "same" or "valid"

    @property
    def trainable(self) -> bool:
        return self.kind in ("dense", "conv1d")

    def weight_shape(self) -> tuple[int, int]:
        if self.kind == "dense":
            return (self.in_dim, self.out_dim)
        if self.kind == "conv1d":
            return (self.taps, self.filters)
        raise ShapeError(f"layer kind {self.kind!r} has no parameters")


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim)


def conv1d(taps: int, filters: int, padding: str = "same") -> LayerSpec:
    return LayerSpec("conv1d", taps=taps, filters=filters, padding=padding)


def maxpool1d(pool: int, stride: int, padding: str = "valid") -> LayerSpec:
    return LayerSpec("maxpool1d", pool=pool, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


@dataclass(frozen=True)
class Architecture:
    """Ordered layer stack with fixed input width and class count."""

    name: str
    input_dim: int
    num_classes: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Check that consecutive layer shapes compose; raises ShapeError."""
        shape = (self.input_dim,)  # (length,) or (length, channels)
        for q, layer in enumerate(self.layers):
            shape = _propagate_shape(shape, layer, q)
        out = int(np.prod(shape))
        if out != self.num_classes:
            raise ShapeError(
                f"network output width {out} != declared class count {self.num_classes}")
        if self.layers[-1].kind != "softmax":
            raise ShapeError("final layer must be softmax")

    @property
    def trainable_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.trainable)

    def parameter_count(self) -> int:
        total = 0
        for layer in self.trainable_layers:
            r, c = layer.weight_shape()
            total += r * c + c
        return total


def _propagate_shape(shape: tuple[int, ...], layer: LayerSpec, q: int) -> tuple[int, ...]:
    if layer.kind == "dense":
        flat = int(np.prod(shape))
        if flat != layer.in_dim:
            raise ShapeError(
                f"layer {q} (dense) expects {layer.in_dim} inputs, got {flat}")
        return (layer.out_dim,)
    if layer.kind == "conv1d":
        if len(shape) != 1:
            raise ShapeError(f"layer {q} (conv1d) supports a single input channel")
        length = shape[0]
        if layer.padding == "same":
            out_len = length
        else:
            out_len = length - layer.taps + 1
        if out_len < 1:
            raise ShapeError(f"layer {q} (conv1d) kernel longer than input")
        return (out_len, layer.filters)
    if layer.kind == "maxpool1d":
        if len(shape) == 1:
            length, channels = shape[0], 1
        else:
            length, channels = shape
        if layer.padding == "same":
            out_len = math.ceil(length / layer.stride)
        else:
            out_len = (length - layer.pool) // layer.stride + 1
        if out_len < 1:
            raise ShapeError(f"layer {q} (maxpool1d) window larger than input")
        return (out_len, channels)
    if layer.kind in ("relu", "softmax"):
        return shape
    raise ShapeError(f"unknown layer kind {layer.kind!r}")


def mnist_1fc() -> Architecture:
    """Single fully-connected softmax classifier for 28x28 grayscale inputs."""
    return Architecture("mnist-1fc", 784, 10, (dense(784, 10), softmax()))


def cnn(num_classes: int = 8) -> Architecture:
    """1-D CNN for 512-point spectra: 8 conv filters of 16 taps, max pooling
    down to 21 positions, then a 168xC fully connected classifier."""
    return Architecture("cnn", 512, num_classes, (
        conv1d(16, 8, padding="same"),
        relu(),
        maxpool1d(24, 24, padding="valid"),
        dense(168, num_classes),
        softmax(),
    ))


def two_nn(num_classes: int = 8) -> Architecture:
    """Two fully-connected layers (512x32 and 32xC) with a ReLU in between."""
    return Architecture("2nn", 512, num_classes, (
        dense(512, 32),
        relu(),
        dense(32, num_classes),
        softmax(),
    ))


def toy_dense(input_dim: int, hidden: int, num_classes: int) -> Architecture:
    """Small dense net used for tests and the generic "toy" model id."""
    return Architecture("toy", input_dim, num_classes, (
        dense(input_dim, hidden),
        relu(),
        dense(hidden, num_classes),
        softmax(),
    ))


def build_architecture(model_id: str, feature_dim: int | None = None,
                       num_classes: int | None = None) -> Architecture:
    """Resolve a model id to an Architecture.

    "toy" adapts to the supplied feature_dim / num_classes; the named models
    have fixed input widths.
    """
    if model_id == "mnist-1fc":
        return mnist_1fc()
    if model_id == "cnn":
        return cnn(num_classes or 8)
    if model_id == "2nn":
        return two_nn(num_classes or 8)
    if model_id == "toy":
        if feature_dim is None or num_classes is None:
            raise ValueError("toy model needs feature_dim and num_classes")
        return toy_dense(feature_dim, 16, num_classes)
    raise ValueError(f"unknown model id {model_id!r}")


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass
class ParamSet:
    """Per-layer (weights, biases) tensors.

    Used both for model parameters and for gradients, which are always
    shape-congruent with the model they refer to.
    """

    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases lists must have equal length")

    def copy(self) -> "ParamSet":
        return ParamSet([w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def zeros_like(self) -> "ParamSet":
        return ParamSet([np.zeros_like(w) for w in self.weights],
                        [np.zeros_like(b) for b in self.biases])

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def all_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all()
                   for w, b in zip(self.weights, self.biases))

    def congruent(self, other: "ParamSet") -> bool:
        return (len(self.weights) == len(other.weights)
                and all(a.shape == b.shape for a, b in zip(self.weights, other.weights))
                and all(a.shape == b.shape for a, b in zip(self.biases, other.biases)))

    def _check(self, other: "ParamSet") -> None:
        if not self.congruent(other):
            raise ShapeError("parameter sets are not shape-congruent")

    def add(self, other: "ParamSet") -> "ParamSet":
        self._check(other)
        return ParamSet([a + b for a, b in zip(self.weights, other.weights)],
                        [a + b for a, b in zip(self.biases, other.biases)])

    def sub(self, other: "ParamSet") -> "ParamSet":
        self._check(other)
        return ParamSet([a - b for a, b in zip(self.weights, other.weights)],
                        [a - b for a, b in zip(self.biases, other.biases)])

    def scale(self, s: float) -> "ParamSet":
        return ParamSet([s * w for w in self.weights],
                        [s * b for b in self.biases])

    def scale_per_layer(self, rates) -> "ParamSet":
        """Scale layer q by rates[q]; a scalar or short sequence broadcasts
        (the last rate repeats for deeper layers)."""
        rates = per_layer_rates(rates, len(self.weights))
        return ParamSet([r * w for r, w in zip(rates, self.weights)],
                        [r * b for r, b in zip(rates, self.biases)])

    def __add__(self, other: "ParamSet") -> "ParamSet":
        return self.add(other)

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        return self.sub(other)

    def __mul__(self, s: float) -> "ParamSet":
        return self.scale(s)

    __rmul__ = __mul__

    def distance(self, other: "ParamSet") -> float:
        """Euclidean distance over all entries."""
        self._check(other)
        total = 0.0
        for a, b in zip(self.weights, other.weights):
            total += float(np.sum((a - b) ** 2))
        for a, b in zip(self.biases, other.biases):
            total += float(np.sum((a - b) ** 2))
        return math.sqrt(total)

    def max_abs(self) -> float:
        m = 0.0
        for w, b in zip(self.weights, self.biases):
            if w.size:
                m = max(m, float(np.abs(w).max()))
            if b.size:
                m = max(m, float(np.abs(b).max()))
        return m


# A gradient is just a ParamSet congruent with its model.
GradientSet = ParamSet


def init_params(arch: Architecture, seed: int) -> ParamSet:
    """Uniform(-0.05, 0.05) initialization from a run-level seed.

    Every device starts from this identical parameter set, so the seed fully
    determines the shared starting point.
    """
    rng = np.random.default_rng([int(seed), 101])
    weights, biases = [], []
    for layer in arch.trainable_layers:
        r, c = layer.weight_shape()
        weights.append(rng.uniform(-0.05, 0.05, size=(r, c)))
        biases.append(rng.uniform(-0.05, 0.05, size=c))
    return ParamSet(weights, biases)


def per_layer_rates(rates, n_layers: int) -> tuple[float, ...]:
    """Normalize a scalar or sequence of per-layer rates to length n_layers."""
    if np.isscalar(rates):
        return (float(rates),) * n_layers
    rates = tuple(float(r) for r in rates)
    if not rates:
        raise ValueError("empty rate sequence")
    if len(rates) < n_layers:
        rates = rates + (rates[-1],) * (n_layers - len(rates))
    return rates[:n_layers]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _conv_padding(taps: int) -> tuple[int, int]:
    # stride-1 zero padding that preserves length: total = taps - 1,
    # rounded left-light (7, 8 for 16 taps)
    left = (taps - 1) // 2
    return left, taps - 1 - left


def _pool_windows(x: np.ndarray, pool: int, stride: int, padding: str):
    """Return (windows, starts, padded) for a (n, L, C) input."""
    n, length, channels = x.shape
    if padding == "same":
        out_len = math.ceil(length / stride)
        total = max(0, (out_len - 1) * stride + pool - length)
        if total:
            x = np.concatenate(
                [x, np.full((n, total, channels), -np.inf)], axis=1)
    else:
        out_len = (length - pool) // stride + 1
    starts = np.arange(out_len) * stride
    idx = starts[:, None] + np.arange(pool)[None, :]        # (P, pool)
    windows = x[:, idx, :]                                   # (n, P, pool, C)
    return windows, idx, x.shape[1]


def forward(arch: Architecture, params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Class-probability output for a single feature vector or a batch.

    Output rows are nonnegative and sum to one.
    """
    single = x.ndim == 1
    probs, _ = _forward_cached(arch, params, np.atleast_2d(np.asarray(x, dtype=float)))
    return probs[0] if single else probs


def _forward_cached(arch: Architecture, params: ParamSet, x: np.ndarray):
    if x.shape[1] != arch.input_dim:
        raise ShapeError(
            f"input width {x.shape[1]} != architecture input {arch.input_dim}")
    h = x
    caches = []
    t = 0  # trainable layer index
    for q, layer in enumerate(arch.layers):
        if layer.kind == "dense":
            w, b = params.weights[t], params.biases[t]
            if w.shape != layer.weight_shape():
                raise ShapeError(f"layer {q} (dense) weight shape {w.shape} "
                                 f"!= declared {layer.weight_shape()}")
            in_shape = h.shape
            flat = h.reshape(h.shape[0], -1)
            if flat.shape[1] != layer.in_dim:
                raise ShapeError(f"layer {q} (dense) got {flat.shape[1]} inputs, "
                                 f"expected {layer.in_dim}")
            caches.append(("dense", t, flat, in_shape))
            h = flat @ w + b
            t += 1
        elif layer.kind == "conv1d":
            w, b = params.weights[t], params.biases[t]
            if h.ndim != 2:
                raise ShapeError(f"layer {q} (conv1d) expects single-channel input")
            left, right = _conv_padding(layer.taps) if layer.padding == "same" else (0, 0)
            hp = np.pad(h, ((0, 0), (left, right)))
            # materialize the sliding windows so the matmul runs as one
            # contiguous 2-D GEMM; the strided view is far slower
            windows = np.ascontiguousarray(
                np.lib.stride_tricks.sliding_window_view(hp, layer.taps, axis=1))
            n_rows, out_len, taps = windows.shape
            caches.append(("conv1d", t, windows, h.shape[1], left))
            h = (windows.reshape(-1, taps) @ w).reshape(n_rows, out_len, -1) + b
            t += 1
        elif layer.kind == "relu":
            caches.append(("relu", h > 0))
            h = np.maximum(h, 0.0)
        elif layer.kind == "maxpool1d":
            squeezed = h.ndim == 2
            if squeezed:
                h = h[:, :, None]
            windows, idx, padded_len = _pool_windows(h, layer.pool, layer.stride, layer.padding)
            arg = windows.argmax(axis=2)                    # (n, P, C)
            h_in_len = h.shape[1]
            h = windows.max(axis=2)
            caches.append(("maxpool1d", idx, arg, h_in_len, padded_len, squeezed))
        elif layer.kind == "softmax":
            z = h - h.max(axis=1, keepdims=True)
            e = np.exp(z)
            h = e / e.sum(axis=1, keepdims=True)
            caches.append(("softmax",))
        else:
            raise ShapeError(f"unknown layer kind {layer.kind!r}")
    return h, caches


def _forward_infer(arch: Architecture, params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Probabilities only, no backward caches; used for bulk evaluation."""
    h = x
    t = 0
    for layer in arch.layers:
        if layer.kind == "dense":
            w, b = params.weights[t], params.biases[t]
            h = h.reshape(h.shape[0], -1) @ w + b
            t += 1
        elif layer.kind == "conv1d":
            w, b = params.weights[t], params.biases[t]
            left, right = _conv_padding(layer.taps) if layer.padding == "same" else (0, 0)
            hp = np.pad(h, ((0, 0), (left, right)))
            windows = np.lib.stride_tricks.sliding_window_view(hp, layer.taps, axis=1)
            h = windows @ w + b
            t += 1
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
        elif layer.kind == "maxpool1d":
            if h.ndim == 2:
                h = h[:, :, None]
            n, length, c = h.shape
            if layer.padding == "valid" and layer.pool == layer.stride:
                p = (length - layer.pool) // layer.stride + 1
                h = h[:, :p * layer.stride, :].reshape(n, p, layer.stride, c).max(axis=2)
            else:
                windows, _, _ = _pool_windows(h, layer.pool, layer.stride, layer.padding)
                h = windows.max(axis=2)
        else:  # softmax
            z = h - h.max(axis=1, keepdims=True)
            e = np.exp(z)
            h = e / e.sum(axis=1, keepdims=True)
    return h


def cross_entropy(probs: np.ndarray, y) -> float:
    """Negative log-likelihood of the true labels; mean over a batch.

    Probabilities are clamped at 1e-12 so a zero never reaches the log.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 1:
        return float(-np.log(max(float(probs[int(y)]), LOG_FLOOR)))
    y = np.asarray(y, dtype=int)
    picked = np.clip(probs[np.arange(len(y)), y], LOG_FLOOR, None)
    return float(-np.log(picked).mean())


def backward(arch: Architecture, params: ParamSet,
             x: np.ndarray, y: np.ndarray) -> tuple[float, GradientSet]:
    """Mean-batch cross-entropy loss and its gradient w.r.t. every
    trainable tensor. Deterministic for fixed inputs."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[0] != y.shape[0]:
        raise ShapeError("feature/label count mismatch")

    probs, caches = _forward_cached(arch, params, x)
    n = x.shape[0]
    loss = cross_entropy(probs, y)

    grads = params.zeros_like()
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    # softmax folded with the cross-entropy derivative
    if arch.layers[-1].kind != "softmax":
        raise ShapeError("final layer must be softmax")
    d = (probs - onehot) / n

    for cache in reversed(caches[:-1]):
        kind = cache[0]
        if kind == "dense":
            _, t, flat, in_shape = cache
            grads.weights[t][...] = flat.T @ d
            grads.biases[t][...] = d.sum(axis=0)
            d = (d @ params.weights[t].T).reshape(in_shape)
        elif kind == "conv1d":
            _, t, windows, in_len, left = cache
            grads.weights[t][...] = np.einsum("nlt,nlf->tf", windows, d)
            grads.biases[t][...] = d.sum(axis=(0, 1))
            w = params.weights[t]
            dwin = d @ w.T                                   # (n, L_out, taps)
            taps = w.shape[0]
            padded = np.zeros((d.shape[0], windows.shape[1] + taps - 1))
            pos = np.arange(windows.shape[1])[:, None] + np.arange(taps)[None, :]
            np.add.at(padded, (np.arange(d.shape[0])[:, None, None], pos[None, :, :]), dwin)
            d = padded[:, left:left + in_len]
        elif kind == "relu":
            d = d * cache[1]
        elif kind == "maxpool1d":
            _, idx, arg, in_len, padded_len, squeezed = cache
            n_b, p, c = d.shape
            dx = np.zeros((n_b, padded_len, c))
            abs_idx = idx[None, :, 0][..., None] + arg       # (n, P, C) absolute positions
            np.add.at(dx, (np.arange(n_b)[:, None, None], abs_idx,
                           np.arange(c)[None, None, :]), d)
            d = dx[:, :in_len, :]
            if squeezed:
                d = d[:, :, 0]
        elif kind == "softmax":
            raise ShapeError("softmax only supported as the final layer")
    return loss, grads


def evaluate(arch: Architecture, params: ParamSet, x: np.ndarray, y: np.ndarray,
             chunk: int = 128) -> tuple[float, float]:
    """(mean loss, accuracy) over a dataset, evaluated in chunks."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if x.shape[1] != arch.input_dim:
        raise ShapeError(f"input width {x.shape[1]} != architecture input "
                         f"{arch.input_dim}")
    n = x.shape[0]
    loss_sum = 0.0
    correct = 0
    for s in range(0, n, chunk):
        probs = _forward_infer(arch, params, x[s:s + chunk])
        yy = y[s:s + chunk]
        picked = np.clip(probs[np.arange(len(yy)), yy], LOG_FLOOR, None)
        loss_sum += float(-np.log(picked).sum())
        correct += int((probs.argmax(axis=1) == yy).sum())
    return loss_sum / n, correct / n


# ---------------------------------------------------------------------------
# Optimizer steps
# ---------------------------------------------------------------------------

def sgd_step(params: ParamSet, grad: GradientSet, mu: float) -> ParamSet:
    """Plain gradient descent: every tensor moves by -mu * gradient."""
    if mu < 0:
        raise ValueError("step size must be nonnegative")
    params._check(grad)
    return params.sub(grad.scale(mu))


def momentum_step(params: ParamSet, velocity: GradientSet, grad: GradientSet,
                  mu: float, decay: float) -> tuple[ParamSet, GradientSet]:
    """Heavy-ball update: velocity <- decay*velocity - mu*grad, then apply."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("momentum decay must lie in [0, 1)")
    params._check(grad)
    velocity = velocity.scale(decay).sub(grad.scale(mu))
    return params.add(velocity), velocity


# ---------------------------------------------------------------------------
# Checkpoint I/O ("FLW1", little-endian)
# ---------------------------------------------------------------------------

def save_checkpoint(params: ParamSet, path) -> None:
    """Write a little-endian binary checkpoint.

    Layout: magic "FLW1", layer count u16, then per trainable layer
    rows u32, cols u32, float64 weights row-major, float64 biases.
    """
    with open(path, "wb") as fh:
        fh.write(b"FLW1")
        fh.write(struct.pack("<H", len(params.weights)))
        for w, b in zip(params.weights, params.biases):
            rows, cols = w.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != b"FLW1":
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    (count,) = struct.unpack_from("<H", blob, 4)
    off = 6
    weights, biases = [], []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        w = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off)
        off += rows * cols * 8
        b = np.frombuffer(blob, dtype="<f8", count=cols, offset=off)
        off += cols * 8
        weights.append(w.reshape(rows, cols).astype(float))
        biases.append(b.astype(float))
    return ParamSet(weights, biases)
