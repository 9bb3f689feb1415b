"""Small feed-forward network engine: flat parameter vectors, forward passes,
exact softmax cross-entropy gradients and plain SGD.

Everything runs in float64 on numpy arrays. Parameters live in a single flat
vector; a ``LayerStack`` knows how to view that vector as per-layer
``(W, b)`` pairs with ``W`` of shape ``(n_in, n_out)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, NumericOverflowError

ACTIVATIONS = ("relu", "tanh", "identity")

Layout = tuple[tuple[int, tuple[int, ...]], ...]


class WeightVector:
    """Immutable flat parameter set plus the layout mapping it onto layers."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Layout):
        arr = np.array(values, dtype=np.float64)  # always a private copy
        layout = tuple((int(m), tuple(int(s) for s in shape)) for m, shape in layout)
        expected = sum(int(np.prod(shape)) for _, shape in layout)
        if arr.ndim != 1 or arr.size != expected:
            raise ConfigurationError(
                f"weight vector has {arr.size} values but layout describes {expected}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "layout", layout)

    @classmethod
    def _wrap(cls, arr: np.ndarray, layout: Layout) -> "WeightVector":
        # trusted fast path: arr is freshly allocated and owned by the result
        out = cls.__new__(cls)
        arr.setflags(write=False)
        object.__setattr__(out, "values", arr)
        object.__setattr__(out, "layout", layout)
        return out

    def __setattr__(self, name, value):
        raise AttributeError("WeightVector is immutable")

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"WeightVector(dim={self.values.size}, layers={len({m for m, _ in self.layout})})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None

    def _check(self, other: "WeightVector") -> None:
        if self.layout != other.layout:
            raise ConfigurationError("weight vectors have different layouts")

    def __add__(self, other: "WeightVector") -> "WeightVector":
        self._check(other)
        return WeightVector._wrap(self.values + other.values, self.layout)

    def __sub__(self, other: "WeightVector") -> "WeightVector":
        self._check(other)
        return WeightVector._wrap(self.values - other.values, self.layout)

    def __mul__(self, c: float) -> "WeightVector":
        return WeightVector._wrap(self.values * float(c), self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "WeightVector":
        return WeightVector._wrap(-self.values, self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def distance(self, other: "WeightVector") -> float:
        self._check(other)
        return float(np.linalg.norm(self.values - other.values))

    def zeros_like(self) -> "WeightVector":
        return WeightVector._wrap(np.zeros_like(self.values), self.layout)

    def copy_values(self) -> np.ndarray:
        """Writable copy of the flat values."""
        return self.values.copy()


# Gradients share the exact representation of the parameters they differentiate.
GradientVector = WeightVector


@dataclass(frozen=True)
class Layer:
    n_in: int
    n_out: int
    activation: str = "relu"


class LayerStack:
    """An M-layer fully connected network; the last layer emits logits."""

    def __init__(self, layers: Sequence[Layer]):
        layers = tuple(layers)
        if not layers:
            raise ConfigurationError("a layer stack needs at least one layer")
        for m, layer in enumerate(layers):
            if layer.n_in < 1 or layer.n_out < 1:
                raise ConfigurationError(f"layer {m} has zero width ({layer.n_in}->{layer.n_out})")
            if layer.activation not in ACTIVATIONS:
                raise ConfigurationError(f"layer {m}: unknown activation {layer.activation!r}")
            if m and layers[m - 1].n_out != layer.n_in:
                raise ConfigurationError(
                    f"layer {m} expects width {layer.n_in} but layer {m - 1} emits {layers[m - 1].n_out}"
                )
        if layers[-1].activation != "identity":
            raise ConfigurationError("the final layer must emit raw logits (identity activation)")
        self.layers = layers
        layout = []
        offsets = []
        pos = 0
        for m, layer in enumerate(layers):
            w_size = layer.n_in * layer.n_out
            offsets.append((pos, pos + w_size, pos + w_size + layer.n_out))
            pos += w_size + layer.n_out
            layout.append((m, (layer.n_in, layer.n_out)))
            layout.append((m, (layer.n_out,)))
        self.layout: Layout = tuple(layout)
        self.n_params = pos
        self._offsets = tuple(offsets)

    @classmethod
    def mlp(cls, widths: Sequence[int], activation: str = "relu") -> "LayerStack":
        """``widths = (d, h1, ..., C)``; hidden layers use ``activation``, the last is linear."""
        widths = list(widths)
        if len(widths) < 2:
            raise ConfigurationError("need at least input and output widths")
        layers = [
            Layer(widths[i], widths[i + 1], "identity" if i == len(widths) - 2 else activation)
            for i in range(len(widths) - 1)
        ]
        return cls(layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __eq__(self, other) -> bool:
        return isinstance(other, LayerStack) and self.layers == other.layers

    __hash__ = None

    def __repr__(self) -> str:
        widths = [self.layers[0].n_in] + [l.n_out for l in self.layers]
        return f"LayerStack({'->'.join(map(str, widths))}, {self.layers[0].activation})"

    @property
    def n_inputs(self) -> int:
        return self.layers[0].n_in

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].n_out

    def unpack(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer ``(W, b)`` views into ``flat`` (no copies)."""
        out = []
        for layer, (a, b, c) in zip(self.layers, self._offsets):
            out.append((flat[a:b].reshape(layer.n_in, layer.n_out), flat[b:c]))
        return out

    def check(self, w: WeightVector) -> None:
        if w.layout != self.layout:
            raise ConfigurationError("weight layout does not match the layer stack")

    def init(self, rng: np.random.Generator) -> WeightVector:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        flat = np.empty(self.n_params)
        for layer, (a, _, c) in zip(self.layers, self._offsets):
            bound = 1.0 / np.sqrt(layer.n_in)
            flat[a:c] = rng.uniform(-bound, bound, size=c - a)
        return WeightVector._wrap(flat, self.layout)

    def wrap(self, flat: np.ndarray) -> WeightVector:
        if flat.shape != (self.n_params,):
            raise ConfigurationError(f"expected {self.n_params} parameters, got {flat.shape}")
        return WeightVector(flat, self.layout)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ConfigurationError(f"batch shapes disagree: inputs {x.shape}, labels {y.shape}")
        if x.shape[0] < 1:
            raise ConfigurationError("empty batch")
        if y.min() < 0:
            raise ConfigurationError("negative class label")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]


# ---------------------------------------------------------------- numerics


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray | float:
    """d act / d z, given the pre-activation ``z`` and the output ``a``."""
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return 1.0


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    n, c = logits.shape
    if labels.max() >= c:
        raise ConfigurationError(f"label {labels.max()} out of range for {c} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(z[:, 0]) - shifted[rows, labels]))
    grad = e / z
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def _as_inputs(stack: LayerStack, x) -> np.ndarray:
    x = x.inputs if isinstance(x, Batch) else np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != stack.n_inputs:
        raise ConfigurationError(
            f"layer 0 expects {stack.n_inputs} input features, got {x.shape[1]}"
        )
    return x


def forward_raw(stack: LayerStack, params, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Pre-activations and activations of every layer for unpacked ``params``."""
    pre, post = [], []
    a = x
    for m, (layer, (W, b)) in enumerate(zip(stack.layers, params)):
        z = a @ W + b
        a = activate(layer.activation, z)
        if not np.isfinite(a).all():
            raise NumericOverflowError(f"non-finite activations in layer {m}", layer=m)
        pre.append(z)
        post.append(a)
    return pre, post


def backward_raw(stack: LayerStack, params, x, pre, post, d_out: np.ndarray, grad_flat: np.ndarray,
                 extra: dict[int, np.ndarray] | None = None) -> None:
    """Accumulate d loss / d params into ``grad_flat`` given d loss / d logits.

    ``extra`` maps a layer index m to an additional gradient w.r.t. that
    layer's activation output (used when activations feed other graphs).
    """
    views = stack.unpack(grad_flat)
    delta = d_out
    for m in range(len(stack) - 1, -1, -1):
        inp = x if m == 0 else post[m - 1]
        gW, gb = views[m]
        gW += inp.T @ delta
        gb += delta.sum(axis=0)
        if m == 0:
            break
        da = delta @ params[m][0].T
        if extra is not None and (m - 1) in extra:
            da = da + extra[m - 1]
        prev = stack.layers[m - 1].activation
        delta = da * activation_grad(prev, pre[m - 1], post[m - 1])


# ---------------------------------------------------------------- public ops


def forward_all_layers(stack: LayerStack, w: WeightVector, x) -> list[np.ndarray]:
    """Activation matrix of every layer; the last entry is the logits."""
    stack.check(w)
    _, post = forward_raw(stack, stack.unpack(w.values), _as_inputs(stack, x))
    return post


def logits(stack: LayerStack, w: WeightVector, x) -> np.ndarray:
    return forward_all_layers(stack, w, x)[-1]


def predict(stack: LayerStack, w: WeightVector, x) -> np.ndarray:
    return np.argmax(logits(stack, w, x), axis=1)


def loss_and_grad(stack: LayerStack, w: WeightVector, batch: Batch) -> tuple[float, GradientVector]:
    stack.check(w)
    params = stack.unpack(w.values)
    x = _as_inputs(stack, batch)
    pre, post = forward_raw(stack, params, x)
    loss, d_logits = softmax_cross_entropy(post[-1], batch.labels)
    grad = np.zeros(stack.n_params)
    backward_raw(stack, params, x, pre, post, d_logits, grad)
    return loss, WeightVector._wrap(grad, w.layout)


def sgd_step(w: WeightVector, g: GradientVector, lr: float) -> WeightVector:
    w._check(g)
    if lr < 0:
        raise ConfigurationError("learning rate must be non-negative")
    return WeightVector._wrap(w.values - lr * g.values, w.layout)


def accuracy(stack: LayerStack, w: WeightVector, inputs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ConfigurationError("accuracy on an empty test set")
    return float(np.mean(predict(stack, w, inputs) == labels))
