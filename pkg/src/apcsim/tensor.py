"""Dense tensor engine: sequential layers, a gradient tape, and the loss.

Tensors are float64 numpy arrays.  Layers run batched internally (leading
batch axis); :func:`forward` and :func:`backward` are the single-sample entry
points used by the rest of the package.
"""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import EmptyTape, LabelOutOfRange, NonFinite, ShapeMismatch
from .rng import SplitMix64

Tensor = np.ndarray


def as_tensor(values, shape: Optional[Sequence[int]] = None) -> Tensor:
    """Coerce to a finite float64 array, optionally reshaped."""
    t = np.array(values, dtype=np.float64)
    if shape is not None:
        if math.prod(shape) != t.size:
            raise ShapeMismatch(f"cannot view {t.size} values as shape {tuple(shape)}")
        t = t.reshape(shape)
    if t.ndim == 0 or any(d < 1 for d in t.shape):
        raise ShapeMismatch(f"tensor shape {t.shape} has an empty dimension")
    if not np.all(np.isfinite(t)):
        raise NonFinite("tensor contains NaN or Inf")
    return t


class LayerKind(str, enum.Enum):
    DENSE = "Dense"
    CONV2D = "Conv2d"
    RELU = "ReLU"
    MAXPOOL2D = "MaxPool2d"
    FLATTEN = "Flatten"
    SOFTMAX = "Softmax"


_PARAMS = {
    LayerKind.DENSE: ("in_features", "out_features"),
    LayerKind.CONV2D: ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "padding"),
    LayerKind.MAXPOOL2D: ("window", "stride"),
    LayerKind.RELU: (),
    LayerKind.FLATTEN: (),
    LayerKind.SOFTMAX: (),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    params: tuple = ()  # sorted (name, value) pairs

    def __post_init__(self):
        kind = LayerKind(self.kind)
        object.__setattr__(self, "kind", kind)
        given = dict(self.params)
        expected = _PARAMS[kind]
        if kind is LayerKind.CONV2D:
            given.setdefault("stride", 1)
            given.setdefault("padding", 0)
        if kind is LayerKind.MAXPOOL2D:
            given.setdefault("stride", given.get("window"))
        if set(given) != set(expected):
            raise ValueError(f"{kind.value} expects parameters {expected}, got {sorted(given)}")
        for name, value in given.items():
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ValueError(f"{kind.value}.{name} must be an integer")
            floor = 0 if name == "padding" else 1
            if value < floor:
                raise ValueError(f"{kind.value}.{name} must be >= {floor}")
        object.__setattr__(self, "params", tuple(sorted((k, int(v)) for k, v in given.items())))

    def __getattr__(self, name):
        for key, value in object.__getattribute__(self, "params"):
            if key == name:
                return value
        raise AttributeError(name)

    @classmethod
    def dense(cls, in_features, out_features):
        return cls(LayerKind.DENSE, (("in_features", in_features), ("out_features", out_features)))

    @classmethod
    def conv2d(cls, in_channels, out_channels, kernel_h, kernel_w=None, stride=1, padding=0):
        kernel_w = kernel_h if kernel_w is None else kernel_w
        return cls(LayerKind.CONV2D, (("in_channels", in_channels), ("out_channels", out_channels),
                                      ("kernel_h", kernel_h), ("kernel_w", kernel_w),
                                      ("stride", stride), ("padding", padding)))

    @classmethod
    def maxpool2d(cls, window, stride=None):
        return cls(LayerKind.MAXPOOL2D, (("window", window), ("stride", window if stride is None else stride)))

    @classmethod
    def relu(cls):
        return cls(LayerKind.RELU)

    @classmethod
    def flatten(cls):
        return cls(LayerKind.FLATTEN)

    @classmethod
    def softmax(cls):
        return cls(LayerKind.SOFTMAX)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind")
        return cls(LayerKind(kind), tuple(d.items()))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, **dict(self.params)}

    def output_shape(self, input_shape: Sequence[int]) -> tuple:
        shape = tuple(int(d) for d in input_shape)
        k = self.kind
        if k is LayerKind.DENSE:
            if shape != (self.in_features,):
                raise ShapeMismatch(f"Dense expects ({self.in_features},), got {shape}")
            return (self.out_features,)
        if k is LayerKind.CONV2D:
            if len(shape) != 3 or shape[0] != self.in_channels:
                raise ShapeMismatch(f"Conv2d expects ({self.in_channels}, H, W), got {shape}")
            oh = (shape[1] + 2 * self.padding - self.kernel_h) // self.stride + 1
            ow = (shape[2] + 2 * self.padding - self.kernel_w) // self.stride + 1
            if shape[1] + 2 * self.padding < self.kernel_h or shape[2] + 2 * self.padding < self.kernel_w:
                raise ShapeMismatch(f"Conv2d kernel larger than padded input {shape}")
            return (self.out_channels, oh, ow)
        if k is LayerKind.MAXPOOL2D:
            if len(shape) != 3 or shape[1] < self.window or shape[2] < self.window:
                raise ShapeMismatch(f"MaxPool2d window {self.window} does not fit input {shape}")
            return (shape[0], (shape[1] - self.window) // self.stride + 1,
                    (shape[2] - self.window) // self.stride + 1)
        if k is LayerKind.FLATTEN:
            return (math.prod(shape),)
        if k is LayerKind.SOFTMAX:
            if len(shape) != 1 or shape[0] < 2:
                raise ShapeMismatch(f"Softmax expects a 1-D vector of length >= 2, got {shape}")
            return shape
        return shape

    def param_shapes(self) -> dict:
        if self.kind is LayerKind.DENSE:
            return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}
        if self.kind is LayerKind.CONV2D:
            return {"weight": (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w),
                    "bias": (self.out_channels,)}
        return {}


def shape_chain(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple]:
    """Input shape followed by every layer's output shape."""
    shapes = [tuple(input_shape)]
    for layer in layers:
        shapes.append(layer.output_shape(shapes[-1]))
    return shapes


def init_weights(layers: Sequence[LayerSpec], seed: int) -> list[dict]:
    """Glorot-uniform weights from a SplitMix64 stream, zero biases."""
    rng = SplitMix64(seed)
    weights = []
    for layer in layers:
        shapes = layer.param_shapes()
        if not shapes:
            weights.append({})
            continue
        w_shape = shapes["weight"]
        receptive = math.prod(w_shape[2:]) if len(w_shape) > 2 else 1
        fan_in, fan_out = w_shape[1] * receptive, w_shape[0] * receptive
        s = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-s, s, math.prod(w_shape)).reshape(w_shape)
        weights.append({"weight": w, "bias": np.zeros(shapes["bias"])})
    return weights


@dataclass
class _Step:
    index: int
    layer: LayerSpec
    params: dict
    x: np.ndarray
    out_shape: tuple
    cache: object = None


@dataclass
class GradientTape:
    """Records the batched forward computation for reverse-mode replay."""

    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)


@dataclass
class Gradients:
    params: list  # per-layer dict matching the weights structure
    input: np.ndarray


def _softmax_rows(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_forward(layer: LayerSpec, params: dict, x: np.ndarray):
    k = layer.kind
    if k is LayerKind.DENSE:
        return x @ params["weight"].T + params["bias"], None
    if k is LayerKind.CONV2D:
        return kernels.conv2d_forward(x, params["weight"], params["bias"], layer.stride, layer.padding), None
    if k is LayerKind.RELU:
        return np.maximum(x, 0.0), None
    if k is LayerKind.MAXPOOL2D:
        y, index = kernels.maxpool2d_forward(x, layer.window, layer.stride)
        return y, index
    if k is LayerKind.FLATTEN:
        return x.reshape(x.shape[0], -1), None
    if k is LayerKind.SOFTMAX:
        y = _softmax_rows(x)
        return y, y
    raise ValueError(f"unknown layer kind {k}")


def _layer_backward(step: _Step, gy: np.ndarray):
    layer, x, p = step.layer, step.x, step.params
    k = layer.kind
    if k is LayerKind.DENSE:
        return gy @ p["weight"], {"weight": gy.T @ x, "bias": gy.sum(axis=0)}
    if k is LayerKind.CONV2D:
        gx, gw, gb = kernels.conv2d_backward(x, p["weight"], gy, layer.stride, layer.padding)
        return gx, {"weight": gw, "bias": gb}
    if k is LayerKind.RELU:
        return gy * (x > 0.0), {}
    if k is LayerKind.MAXPOOL2D:
        return kernels.maxpool2d_backward(gy, step.cache, x.shape), {}
    if k is LayerKind.FLATTEN:
        return gy.reshape(x.shape), {}
    if k is LayerKind.SOFTMAX:
        s = step.cache
        return s * (gy - (gy * s).sum(axis=-1, keepdims=True)), {}
    raise ValueError(f"unknown layer kind {k}")


Hook = Callable[[int, LayerSpec, np.ndarray, int], None]


def forward_batch(layers: Sequence[LayerSpec], weights: Sequence[dict], xb: np.ndarray,
                  tape: Optional[GradientTape] = None, hook: Optional[Hook] = None,
                  check_finite: bool = True) -> list[np.ndarray]:
    """Run a batch (leading axis) through ``layers``; return every layer's batched output.

    ``hook(index, layer, output, elapsed_ns)`` is called after each layer with the
    first sample's output; it must not modify the array.
    """
    outputs = []
    x = xb
    for i, layer in enumerate(layers):
        params = weights[i]
        if hook is not None:
            t0 = time.perf_counter_ns()
            y, cache = _layer_forward(layer, params, x)
            elapsed = time.perf_counter_ns() - t0
        else:
            y, cache = _layer_forward(layer, params, x)
        if check_finite and not np.isfinite(y).all():
            raise NonFinite(f"layer {i} ({layer.kind.value}) produced NaN/Inf")
        if tape is not None:
            tape.steps.append(_Step(i, layer, params, x, y.shape, cache))
        if hook is not None:
            hook(i, layer, y[0], elapsed)
        outputs.append(y)
        x = y
    return outputs


def _check_input(layers, input_shape, x):
    if input_shape is not None and tuple(x.shape) != tuple(input_shape):
        raise ShapeMismatch(f"input shape {tuple(x.shape)} != model input shape {tuple(input_shape)}")
    if layers:
        layers[0].output_shape(x.shape)


def forward(layers: Sequence[LayerSpec], weights: Sequence[dict], x: Tensor,
            tape: Optional[GradientTape] = None, hook: Optional[Hook] = None,
            input_shape: Optional[Sequence[int]] = None) -> list[Tensor]:
    """Single-sample forward pass returning each layer's output in execution order."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(layers, input_shape, x)
    if not np.isfinite(x).all():
        raise NonFinite("input contains NaN or Inf")
    outs = forward_batch(layers, weights, x[None], tape=tape, hook=hook)
    return [o[0] for o in outs]


def backward(tape: GradientTape, loss_gradient: np.ndarray, upto: Optional[int] = None,
             batched: bool = False) -> Gradients:
    """Replay ``tape`` in reverse.

    ``loss_gradient`` is the gradient with respect to the output of layer
    ``upto`` (default: the last recorded layer).  Parameter gradients are summed
    over the batch; entries for layers after ``upto`` are empty dicts.
    """
    if not tape.steps:
        raise EmptyTape("backward called on an empty tape")
    last = len(tape.steps) - 1 if upto is None else upto
    if not 0 <= last < len(tape.steps):
        raise IndexError(f"upto={upto} outside recorded layers")
    g = np.asarray(loss_gradient, dtype=np.float64)
    if not batched:
        g = g[None]
    expected = tape.steps[last].out_shape[1:]
    if g.shape[1:] != expected:
        raise ShapeMismatch(f"loss gradient shape {g.shape[1:]} != layer output {expected}")
    params: list = [{} for _ in tape.steps]
    for step in reversed(tape.steps[: last + 1]):
        g, pg = _layer_backward(step, g)
        params[step.index] = pg
    return Gradients(params=params, input=g if batched else g[0])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax_rows(np.asarray(logits, dtype=np.float64))


def softmax_cross_entropy(logits: Tensor, label: int) -> tuple[float, Tensor]:
    """Cross-entropy of ``softmax(logits)`` against ``label`` and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ShapeMismatch("logits must be a 1-D vector of length >= 2")
    if not 0 <= int(label) < z.size:
        raise LabelOutOfRange(f"label {label} outside [0, {z.size})")
    lp = log_softmax(z)
    grad = np.exp(lp)
    grad[label] -= 1.0
    return float(-lp[label]), grad


def softmax_cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row losses and per-row gradients for a batch of logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise LabelOutOfRange("label outside class range")
    lp = log_softmax(logits)
    rows = np.arange(len(labels))
    grad = np.exp(lp)
    grad[rows, labels] -= 1.0
    return -lp[rows, labels], grad
