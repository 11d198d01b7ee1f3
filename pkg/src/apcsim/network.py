"""Model definition, mini-batch SGD training, prediction and model files."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import binio
from .errors import DivergedTraining, FormatError, LabelOutOfRange, ShapeMismatch
from .rng import SplitMix64
from .tensor import (
    GradientTape, LayerKind, LayerSpec, backward, forward, forward_batch, init_weights, shape_chain,
    softmax, softmax_cross_entropy_batch,
)

log = logging.getLogger(__name__)

MODEL_MAGIC = b"APCM"


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        if not self.layers:
            raise ValueError("model needs at least one layer")
        shapes = self.shapes()
        if len(shapes[-1]) != 1:
            raise ShapeMismatch(f"final layer must produce a 1-D class-score vector, got {shapes[-1]}")

    def shapes(self) -> list[tuple]:
        return shape_chain(self.layers, self.input_shape)

    @property
    def class_count(self) -> int:
        return self.shapes()[-1][0]

    @property
    def logits_index(self) -> int:
        """Index of the layer whose output are the logits (the one before a trailing Softmax)."""
        last = len(self.layers) - 1
        if self.layers[last].kind is LayerKind.SOFTMAX and last > 0:
            return last - 1
        return last

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(d["name"], tuple(d["input_shape"]), [LayerSpec.from_dict(l) for l in d["layers"]])
        except KeyError as exc:
            raise FormatError(f"model spec missing field {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "ModelSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (n, *input_shape)
    labels: np.ndarray  # (n,) int64
    class_count: int
    ids: Optional[list] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ShapeMismatch(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise LabelOutOfRange("label outside [0, class_count)")
        if self.ids is None:
            self.ids = [f"{i:06d}" for i in range(len(self.labels))]
        elif len(self.ids) != len(self.labels):
            raise ShapeMismatch("ids length differs from dataset length")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.inputs[index], self.labels[index], self.class_count,
                              [self.ids[i] for i in index])


@dataclass
class TrainedModel:
    spec: ModelSpec
    weights: list
    training_summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.spec.layers):
            raise ShapeMismatch("one weight dict per layer required")
        for layer, params in zip(self.spec.layers, self.weights):
            expected = layer.param_shapes()
            if set(params) != set(expected):
                raise ShapeMismatch(f"{layer.kind.value} parameters {sorted(params)} != {sorted(expected)}")
            for name, shape in expected.items():
                if tuple(params[name].shape) != tuple(shape):
                    raise ShapeMismatch(f"{layer.kind.value}.{name} shape {params[name].shape} != {shape}")
                if not np.isfinite(params[name]).all():
                    raise DivergedTraining(f"non-finite {layer.kind.value}.{name}")

    @property
    def name(self) -> str:
        return self.spec.name

    def forward(self, x, tape: Optional[GradientTape] = None, hook=None) -> list:
        return forward(self.spec.layers, self.weights, x, tape=tape, hook=hook, input_shape=self.spec.input_shape)

    def logits(self, x) -> np.ndarray:
        return self.forward(x)[self.spec.logits_index]

    def probabilities_from_outputs(self, outputs) -> np.ndarray:
        if self.spec.layers[-1].kind is LayerKind.SOFTMAX:
            return outputs[-1]
        return softmax(outputs[-1])


def predict(model: TrainedModel, x) -> tuple[int, np.ndarray]:
    """Class index (lowest index on ties) and probability vector."""
    probs = model.probabilities_from_outputs(model.forward(x))
    return int(np.argmax(probs)), probs


def predict_batch(model: TrainedModel, xb: np.ndarray) -> np.ndarray:
    outs = forward_batch(model.spec.layers, model.weights, np.asarray(xb, dtype=np.float64))
    return np.argmax(outs[model.spec.logits_index], axis=1)


def _mean_loss(spec: ModelSpec, weights, data: LabeledDataset, chunk: int = 256) -> float:
    total = 0.0
    for start in range(0, len(data), chunk):
        xb = data.inputs[start:start + chunk]
        outs = forward_batch(spec.layers, weights, xb, check_finite=False)
        losses, _ = softmax_cross_entropy_batch(outs[spec.logits_index], data.labels[start:start + chunk])
        total += float(losses.sum())
    return total / len(data)


def train_model(spec: ModelSpec, data: LabeledDataset, cfg: TrainConfig) -> TrainedModel:
    """Mini-batch SGD on softmax cross-entropy; ``batch_size=1`` is the per-sample loop."""
    # Divergence is detected from the loss itself, so numpy's overflow warnings are noise here.
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(spec, data, cfg)


def _train(spec: ModelSpec, data: LabeledDataset, cfg: TrainConfig) -> TrainedModel:
    if len(data) == 0:
        raise ValueError("training data is empty")
    if tuple(data.inputs.shape[1:]) != spec.input_shape:
        raise ShapeMismatch(f"data inputs {data.inputs.shape[1:]} != model input {spec.input_shape}")
    if data.class_count > spec.class_count:
        raise ShapeMismatch(f"{data.class_count} classes but the model outputs {spec.class_count}")
    rng = SplitMix64(cfg.seed)
    weights = init_weights(spec.layers, rng.next_u64())
    upto = spec.logits_index
    initial = _mean_loss(spec, weights, data)
    epoch_losses = []
    n = len(data)
    for epoch in range(int(cfg.epochs)):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tape = GradientTape()
            outs = forward_batch(spec.layers, weights, data.inputs[idx], tape=tape, check_finite=False)
            losses, grad = softmax_cross_entropy_batch(outs[upto], data.labels[idx])
            running += float(losses.sum())
            if not np.isfinite(running):
                raise DivergedTraining(f"loss became non-finite in epoch {epoch + 1}; lower the learning rate")
            grads = backward(tape, grad / len(idx), upto=upto, batched=True)
            for params, g in zip(weights, grads.params):
                for name in params:
                    params[name] -= cfg.learning_rate * g[name]
        epoch_losses.append(running / n)
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, epoch_losses[-1])
    final = _mean_loss(spec, weights, data)
    if not np.isfinite(final) or any(not np.isfinite(p).all() for w in weights for p in w.values()):
        raise DivergedTraining("training produced non-finite weights")
    summary = {"initial_loss": initial, "epoch_losses": epoch_losses, "final_loss": final}
    return TrainedModel(spec, weights, summary)


def accuracy(model: TrainedModel, data: LabeledDataset) -> float:
    preds = np.concatenate([predict_batch(model, data.inputs[s:s + 512]) for s in range(0, len(data), 512)])
    return float((preds == data.labels).mean())


def _flat_params(model: TrainedModel):
    return [model.weights[i][name] for i, layer in enumerate(model.spec.layers)
            for name in sorted(layer.param_shapes())]


def save_model(model: TrainedModel, path) -> Path:
    header = {"spec": model.spec.to_dict(), "training_summary": model.training_summary}
    return binio.write(path, MODEL_MAGIC, header, _flat_params(model))


def load_model(path) -> TrainedModel:
    header, arrays = binio.read(path, MODEL_MAGIC)
    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad model header: {exc}") from exc
    weights = []
    it = iter(arrays)
    try:
        for layer in spec.layers:
            params = {}
            for name in sorted(layer.param_shapes()):
                shape = layer.param_shapes()[name]
                params[name] = next(it).reshape(shape)
            weights.append(params)
    except (StopIteration, ValueError) as exc:
        raise FormatError("weight arrays do not match the model spec") from exc
    if next(it, None) is not None:
        raise FormatError("extra weight arrays in model file")
    return TrainedModel(spec, weights, header.get("training_summary", {}))


def tiny_cnn_spec(name: str = "tiny-cnn") -> ModelSpec:
    """Desk-scale MNIST network: one 3x3 convolution, pooling and a dense classifier."""
    return ModelSpec(name, (1, 28, 28), [
        LayerSpec.conv2d(1, 8, 3), LayerSpec.relu(), LayerSpec.maxpool2d(2), LayerSpec.flatten(),
        LayerSpec.dense(8 * 13 * 13, 10), LayerSpec.softmax(),
    ])


def blobs_mlp_spec(hidden: int = 16, name: str = "blobs-mlp") -> ModelSpec:
    return ModelSpec(name, (2,), [
        LayerSpec.dense(2, hidden), LayerSpec.relu(), LayerSpec.dense(hidden, 2), LayerSpec.softmax(),
    ])


BUILTIN_SPECS = {"tiny-cnn": tiny_cnn_spec, "blobs-mlp": blobs_mlp_spec}
