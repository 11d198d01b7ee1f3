"""Runtime anomaly detection on counter traces.

Traces become fixed-layout feature vectors, a small detector (logistic
regression, linear SVM or a one-hidden-layer MLP) is trained on clean versus
adversarial traces, and :func:`infer_and_detect` scores live inferences.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from . import binio
from .apc import (
    DETERMINISTIC, TABLE_FIELDS, ApcMemory, CounterArray, CounterConfig, TraceRecord, layer_cost, verify_record,
)
from .errors import (
    ApcError, DivergedTraining, FormatError, IntegrityError, LayoutMismatch, MissingMetric, SingleClassDataset,
)
from .network import LabeledDataset, ModelSpec, TrainConfig, TrainedModel, train_model
from .rng import SplitMix64
from .tensor import LayerSpec, forward_batch

log = logging.getLogger(__name__)

DETECTOR_MAGIC = b"APCD"

# Per-layer metric fields usable as features (identity and size columns excluded).
FEATURE_FIELDS = tuple(f for f in TABLE_FIELDS if f not in ("layer_index", "element_count"))
_COLUMN = {name: TABLE_FIELDS.index(name) for name in FEATURE_FIELDS}

MIN_TRAINING_SAMPLES = 10
CONSTANT_RTOL = 1e-12


class DetectorKind(str, enum.Enum):
    LOGISTIC_REGRESSION = "LogisticRegression"
    LINEAR_SVM = "LinearSvm"
    MLP = "Mlp"


class Policy(str, enum.Enum):
    LOG_ONLY = "LogOnly"
    HALT_ON_DETECT = "HaltOnDetect"


class Action(str, enum.Enum):
    NONE = "None"
    LOGGED = "Logged"
    HALTED = "Halted"


# ---------------------------------------------------------------- features

def layout_of(record: TraceRecord) -> tuple:
    """Every metric present in ``record``, as ``(layer_index, metric_name)`` in execution order."""
    layout = []
    for row in record.table:
        for name in FEATURE_FIELDS:
            if not math.isnan(row[_COLUMN[name]]):
                layout.append((int(row[0]), name))
    return tuple(layout)


def _normalize_layout(layout) -> tuple:
    return tuple((int(i), str(name)) for i, name in layout)


class _Gather:
    """Index arrays pulling a layout out of a record table in one step."""

    def __init__(self, layout, layer_indices):
        position = {int(i): r for r, i in enumerate(layer_indices)}
        try:
            self.rows = np.array([position[i] for i, _ in layout], dtype=np.intp)
            self.cols = np.array([_COLUMN[name] for _, name in layout], dtype=np.intp)
        except KeyError as exc:
            raise MissingMetric(f"record lacks {exc.args[0]!r} required by the layout") from exc
        self.layer_indices = tuple(int(i) for i in layer_indices)

    def __call__(self, record: TraceRecord) -> np.ndarray:
        values = record.table[self.rows, self.cols]
        if np.isnan(values).any():
            missing = int(np.flatnonzero(np.isnan(values))[0])
            raise MissingMetric(f"record has no value for layout entry {missing}")
        return values


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        if len(self.values) != len(self.layout):
            raise LayoutMismatch("feature values and layout differ in length")


def build_feature_vector(record: TraceRecord, layout) -> FeatureVector:
    """Extract ``layout`` from a verified record, with no transformation."""
    if not verify_record(record):
        raise IntegrityError(f"trace {record.input_id!r} failed checksum verification")
    layout = _normalize_layout(layout)
    gather = _Gather(layout, record.table[:, 0])
    return FeatureVector(gather(record), layout)


@dataclass
class ApcDataset:
    """Unnormalized feature rows with labels 0 = clean, 1 = adversarial."""

    features: np.ndarray
    labels: np.ndarray
    layout: tuple
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.labels), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.layout = _normalize_layout(self.layout)
        if self.features.shape[1] != len(self.layout):
            raise LayoutMismatch("feature width differs from layout length")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.labels))]

    def __len__(self):
        return len(self.labels)

    def normalization(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-feature mean and standard deviation; degenerate deviations are clamped to 1.

        A feature counts as constant when its spread is rounding noise (below
        ``CONSTANT_RTOL`` of its magnitude), e.g. the mean of a softmax output.
        """
        mean = self.features.mean(axis=0)
        std = self.features.std(axis=0)
        spread = self.features.max(axis=0) - self.features.min(axis=0)
        constant = spread <= CONSTANT_RTOL * np.maximum(np.abs(mean), np.finfo(float).tiny)
        mean[constant] = self.features[0, constant]
        std[constant] = 1.0
        return mean, std

    def subset(self, index) -> "ApcDataset":
        index = np.asarray(index, dtype=np.intp)
        return ApcDataset(self.features[index], self.labels[index], self.layout, [self.ids[i] for i in index])


def build_dataset(clean: Sequence[TraceRecord], adversarial: Sequence[TraceRecord]) -> ApcDataset:
    if not clean or not adversarial:
        raise ValueError("both clean and adversarial traces are required")
    layout = layout_of(clean[0])
    rows, ids = [], []
    for record in list(clean) + list(adversarial):
        if layout_of(record) != layout:
            raise LayoutMismatch(f"trace {record.input_id!r} has a different metric layout")
        rows.append(build_feature_vector(record, layout).values)
        ids.append(record.input_id)
    labels = [0] * len(clean) + [1] * len(adversarial)
    return ApcDataset(np.array(rows), labels, layout, ids)


def split_dataset(data: ApcDataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[ApcDataset, ApcDataset]:
    """Stratified split: each class is shuffled with the seeded generator and cut separately."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = SplitMix64(seed)
    train, test = [], []
    for label in (0, 1):
        members = np.flatnonzero(data.labels == label)
        members = members[rng.permutation(len(members))]
        cut = int(round(len(members) * test_fraction))
        test.extend(members[:cut])
        train.extend(members[cut:])
    return data.subset(sorted(train)), data.subset(sorted(test))


# ---------------------------------------------------------------- detectors

@dataclass(frozen=True)
class DetectorConfig:
    """Training hyperparameters; defaults per detector kind."""

    l2: float = 1e-4
    lr_iterations: int = 500
    lr_step: float = 0.1
    svm_epochs: int = 20
    svm_step: float = 0.01
    mlp_hidden: int = 32
    mlp_epochs: int = 100
    mlp_learning_rate: float = 0.05
    mlp_batch_size: int = 16
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "DetectorConfig":
        return cls(**(d or {}))


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _mlp_spec(width: int, hidden: int) -> ModelSpec:
    return ModelSpec("detector-mlp", (width,), [
        LayerSpec.dense(width, hidden), LayerSpec.relu(), LayerSpec.dense(hidden, 2), LayerSpec.softmax(),
    ])


@dataclass
class DetectorModel:
    kind: DetectorKind
    params: dict
    threshold: float
    layout: tuple
    mean: np.ndarray
    std: np.ndarray
    config: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        self.kind = DetectorKind(self.kind)
        self.layout = _normalize_layout(self.layout)
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        d = len(self.layout)
        if self.mean.shape != (d,) or self.std.shape != (d,):
            raise LayoutMismatch("normalization arrays do not match the layout")
        if self.kind is DetectorKind.MLP:
            self._mlp = TrainedModel(_mlp_spec(d, self.params["l0.weight"].shape[0]), self._mlp_weights())
        elif self.params["weight"].shape != (d,):
            raise LayoutMismatch("weight vector does not match the layout")

    def _mlp_weights(self) -> list:
        weights = [{} for _ in range(4)]
        for key, value in self.params.items():
            layer, name = key.split(".", 1)
            weights[int(layer[1:])][name] = value
        return weights

    @property
    def width(self) -> int:
        return len(self.layout)

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Adversarial scores in [0, 1] for unnormalized feature rows."""
        z = (np.atleast_2d(np.asarray(features, dtype=np.float64)) - self.mean) / self.std
        if self.kind is DetectorKind.MLP:
            return forward_batch(self._mlp.spec.layers, self._mlp.weights, z)[-1][:, 1]
        return _sigmoid(z @ self.params["weight"] + self.params["bias"][0])

    def decide(self, scores) -> np.ndarray:
        return np.asarray(scores) >= self.threshold

    def flops(self) -> int:
        """Arithmetic cost of scoring one vector (normalization included)."""
        d = self.width
        if self.kind is DetectorKind.MLP:
            shapes = self._mlp.spec.shapes()
            return 2 * d + sum(layer_cost(l, shapes[i], shapes[i + 1])[0] for i, l in enumerate(self._mlp.spec.layers))
        return 2 * d + (2 * d + 1) + 3  # normalize, dot plus bias, sigmoid


def _check_trainable(data: ApcDataset):
    if len(data) < MIN_TRAINING_SAMPLES:
        raise ValueError(f"need at least {MIN_TRAINING_SAMPLES} samples, got {len(data)}")
    if len(np.unique(data.labels)) < 2:
        raise SingleClassDataset("training data contains a single class")


def _train_logistic(z, y, cfg: DetectorConfig) -> dict:
    n, d = z.shape
    w, b = np.zeros(d), 0.0
    for _ in range(cfg.lr_iterations):
        err = _sigmoid(z @ w + b) - y
        w = w - cfg.lr_step * (z.T @ err / n + cfg.l2 * w)
        b = b - cfg.lr_step * float(err.mean())
    return {"weight": w, "bias": np.array([b])}


def _train_svm(z, y, cfg: DetectorConfig, seed: int) -> dict:
    n, d = z.shape
    t = 2.0 * y - 1.0
    w, b = np.zeros(d), 0.0
    rng = SplitMix64(seed)
    for _ in range(cfg.svm_epochs):
        for i in rng.permutation(n):
            margin = t[i] * (z[i] @ w + b)
            w = w * (1.0 - cfg.svm_step * cfg.l2)
            if margin < 1.0:
                w = w + cfg.svm_step * t[i] * z[i]
                b += cfg.svm_step * t[i]
    return {"weight": w, "bias": np.array([b])}


def _train_mlp(z, y, cfg: DetectorConfig, seed: int) -> dict:
    spec = _mlp_spec(z.shape[1], cfg.mlp_hidden)
    model = train_model(spec, LabeledDataset(z, y, 2),
                        TrainConfig(cfg.mlp_epochs, cfg.mlp_learning_rate, cfg.mlp_batch_size, seed))
    return {f"l{i}.{name}": value for i, params in enumerate(model.weights) for name, value in params.items()}


def train_detector(data: ApcDataset, kind, seed: int = 0, config: DetectorConfig = DetectorConfig()) -> DetectorModel:
    """Fit a detector on ``data`` (the training split); normalization is frozen into the model."""
    kind = DetectorKind(kind)
    _check_trainable(data)
    mean, std = data.normalization()
    z = (data.features - mean) / std
    y = data.labels.astype(np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        if kind is DetectorKind.LOGISTIC_REGRESSION:
            params = _train_logistic(z, y, config)
        elif kind is DetectorKind.LINEAR_SVM:
            params = _train_svm(z, y, config, seed)
        else:
            params = _train_mlp(z, data.labels, config, seed)
    if not all(np.isfinite(p).all() for p in params.values()):
        raise DivergedTraining(f"{kind.value} training produced non-finite parameters")
    return DetectorModel(kind, params, config.threshold, data.layout, mean, std, config)


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class DetectionMetrics:
    tn: int
    fp: int
    fn: int
    tp: int

    @classmethod
    def from_decisions(cls, labels, decisions) -> "DetectionMetrics":
        labels = np.asarray(labels).astype(bool)
        decisions = np.asarray(decisions).astype(bool)
        return cls(int((~labels & ~decisions).sum()), int((~labels & decisions).sum()),
                   int((labels & ~decisions).sum()), int((labels & decisions).sum()))

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def accuracy(self) -> float:
        return (self.tn + self.tp) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1,
                "confusion": {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp}}


def evaluate_detector(model: DetectorModel, data: ApcDataset) -> DetectionMetrics:
    if data.layout != model.layout:
        raise LayoutMismatch("dataset layout differs from the detector layout")
    return DetectionMetrics.from_decisions(data.labels, model.decide(model.scores(data.features)))


# ---------------------------------------------------------------- streaming detection

@dataclass(frozen=True)
class Alert:
    input_id: str
    is_adversarial: bool
    score: Optional[float]
    action_taken: Action
    prediction: Optional[int] = None
    status: str = "processed"  # processed | error | unprocessed

    def __post_init__(self):
        if self.action_taken is not Action.NONE and not self.is_adversarial:
            raise ValueError("an action requires an adversarial decision")

    def to_json(self) -> dict:
        return {"input_id": self.input_id, "is_adversarial": self.is_adversarial, "score": self.score,
                "action_taken": self.action_taken.value, "prediction": self.prediction, "status": self.status}


def expected_layout(target: TrainedModel, cfg: CounterConfig) -> tuple:
    """Layout that captures of ``target`` under ``cfg`` produce."""
    ca = CounterArray(target, cfg)
    probe = ca.capture(np.zeros(target.spec.input_shape), ApcMemory(1), "layout-probe")[2]
    return layout_of(probe)


class Monitor:
    """Hooked inference plus detector scoring for one stream (one memory and FSM context)."""

    def __init__(self, target: TrainedModel, detector: DetectorModel, cfg: CounterConfig = CounterConfig(),
                 timing: str = DETERMINISTIC, memory: Optional[ApcMemory] = None):
        self.counters = CounterArray(target, cfg, timing)
        self.detector = detector
        self.memory = memory if memory is not None else ApcMemory()
        missing = set(detector.layout) - set(expected_layout(target, cfg))
        if missing:
            raise LayoutMismatch(f"counter configuration does not provide {sorted(missing)[:3]}")
        self._gather = _Gather(detector.layout, self.counters.rows)

    def step(self, input_id: str, x) -> tuple[int, float, TraceRecord]:
        prediction, _, record = self.counters.capture(x, self.memory, input_id)
        score = float(self.detector.scores(self._gather(record))[0])
        return prediction, score, record


def infer_and_detect(target: TrainedModel, detector: DetectorModel, workload: Iterable,
                     cfg: CounterConfig = CounterConfig(), policy=Policy.LOG_ONLY, timing: str = DETERMINISTIC,
                     memory: Optional[ApcMemory] = None) -> Iterator[tuple[Optional[int], Alert]]:
    """Yield ``(prediction, alert)`` per ``(input_id, tensor)`` item of ``workload``."""
    policy = Policy(policy)
    monitor = Monitor(target, detector, cfg, timing, memory)
    halted = False
    for input_id, x in workload:
        input_id = str(input_id)
        if halted:
            yield None, Alert(input_id, False, None, Action.NONE, None, "unprocessed")
            continue
        try:
            prediction, score, _ = monitor.step(input_id, x)
        except (ApcError, ValueError, ArithmeticError) as exc:
            log.error("input %s not scored: %s", input_id, exc)
            yield None, Alert(input_id, False, None, Action.NONE, None, "error")
            continue
        flagged = bool(detector.decide(score))
        action = Action.NONE
        if flagged:
            if policy is Policy.HALT_ON_DETECT:
                action, halted = Action.HALTED, True
                log.warning("adversarial input %s (score %.4f); halting", input_id, score)
            else:
                action = Action.LOGGED
                log.warning("adversarial input %s (score %.4f)", input_id, score)
        yield prediction, Alert(input_id, flagged, score, action, prediction)


def write_alerts(path, alerts: Iterable[Alert]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for alert in alerts:
            fh.write(binio.canonical_json(alert.to_json()) + "\n")
    return path


# ---------------------------------------------------------------- detector file

def save_detector(model: DetectorModel, path) -> Path:
    names = sorted(model.params)
    header = {"kind": model.kind.value, "threshold": model.threshold, "layout": [list(d) for d in model.layout],
              "param_names": names, "param_shapes": [list(model.params[n].shape) for n in names],
              "config": model.config.to_dict()}
    return binio.write(path, DETECTOR_MAGIC, header, [model.mean, model.std] + [model.params[n] for n in names])


def load_detector(path) -> DetectorModel:
    header, arrays = binio.read(path, DETECTOR_MAGIC)
    try:
        names, shapes = header["param_names"], header["param_shapes"]
        if len(arrays) != 2 + len(names):
            raise FormatError("detector array count does not match header")
        params = {n: a.reshape(s) for n, s, a in zip(names, shapes, arrays[2:])}
        return DetectorModel(header["kind"], params, float(header["threshold"]),
                             tuple(tuple(d) for d in header["layout"]), arrays[0], arrays[1],
                             DetectorConfig.from_dict(header.get("config")))
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad detector header: {exc}") from exc
