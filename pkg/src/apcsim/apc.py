"""AI performance counters: per-layer metrics captured by hooking inference.

A :class:`CounterArray` binds a trained model to a :class:`CounterConfig`.
Each capture walks the :class:`ApcMemory` state machine
(Idle -> Armed -> Capturing -> Committing -> Idle) and appends one
checksummed :class:`TraceRecord`.
"""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import FormatError, FsmViolation, IntegrityError, MemoryFull, ShapeMismatch, ZeroElapsed
from .tensor import LayerKind, LayerSpec

WALLCLOCK = "wallclock"
DETERMINISTIC = "deterministic"
TIMING_MODES = (WALLCLOCK, DETERMINISTIC)

# Deterministic timing models a device sustaining 1 GFLOP/s: 1000 flops per microsecond.
DETERMINISTIC_FLOPS_PER_US = 1e3


class Metric(str, enum.Enum):
    SPARSITY = "Sparsity"
    ZERO_COUNT = "ZeroCount"
    DENSE_ACTIVITY = "DenseActivity"
    FLOPS = "Flops"
    TOPS = "Tops"
    MACS = "Macs"
    ENTROPY = "Entropy"
    THROUGHPUT = "Throughput"


ALL_METRICS = frozenset(Metric)

# Per-layer record fields contributed by each family.
FAMILY_FIELDS = {
    Metric.SPARSITY: ("sparsity",),
    Metric.ZERO_COUNT: ("zero_count",),
    Metric.DENSE_ACTIVITY: ("avg_activation", "max_activation", "min_activation"),
    Metric.ENTROPY: ("entropy",),
    Metric.FLOPS: ("flops",),
    Metric.MACS: ("macs",),
    Metric.TOPS: ("tops",),
}

# Synthetic per-element cost of evaluating each family (deterministic overhead model).
FAMILY_ELEMENT_COST = {Metric.SPARSITY: 1, Metric.ZERO_COUNT: 1, Metric.DENSE_ACTIVITY: 3, Metric.ENTROPY: 4}


@dataclass(frozen=True)
class CounterConfig:
    """Which metric families are active and, optionally, on which layers."""

    families: frozenset = ALL_METRICS
    layers: Optional[tuple] = None

    def __post_init__(self):
        fams = frozenset(Metric(f) for f in self.families)
        if not fams:
            raise ValueError("at least one metric family must be enabled")
        object.__setattr__(self, "families", fams)
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(sorted({int(i) for i in self.layers})))

    def enabled(self, metric: Metric) -> bool:
        return metric in self.families

    def selected_layers(self, layer_count: int) -> list[int]:
        if self.layers is None:
            return list(range(layer_count))
        bad = [i for i in self.layers if not 0 <= i < layer_count]
        if bad:
            raise ValueError(f"include list references missing layers {bad}")
        return list(self.layers)

    def to_dict(self) -> dict:
        return {"families": sorted(m.value for m in self.families),
                "layers": None if self.layers is None else list(self.layers)}

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "CounterConfig":
        if not d:
            return cls()
        return cls(frozenset(d.get("families") or ALL_METRICS), d.get("layers"))


@dataclass(frozen=True)
class LayerMetrics:
    layer_index: int
    layer_kind: str
    sparsity: Optional[float]
    zero_count: Optional[int]
    avg_activation: Optional[float]
    max_activation: Optional[float]
    min_activation: Optional[float]
    entropy: Optional[float]
    flops: Optional[int]
    macs: Optional[int]
    tops: Optional[float]
    element_count: int


LAYER_FIELDS = tuple(f.name for f in fields(LayerMetrics))
_INT_FIELDS = {"layer_index", "zero_count", "flops", "macs", "element_count"}


def layer_cost(layer: LayerSpec, input_shape: Sequence[int], output_shape: Sequence[int]) -> tuple[int, int]:
    """``(flops, macs)`` of one layer.

    Dense and Conv2d count a multiply and an add per MAC plus one bias add per
    output element; ReLU and MaxPool count element comparisons; Softmax counts
    exp, sum and divide per element; Flatten is free.
    """
    expected = layer.output_shape(input_shape)
    if tuple(expected) != tuple(output_shape):
        raise ShapeMismatch(f"{layer.kind.value}: output shape {tuple(output_shape)} != {expected}")
    out_elements = math.prod(output_shape)
    k = layer.kind
    if k is LayerKind.DENSE:
        macs = layer.in_features * layer.out_features
        return 2 * macs + layer.out_features, macs
    if k is LayerKind.CONV2D:
        macs = layer.kernel_h * layer.kernel_w * layer.in_channels * out_elements
        return 2 * macs + out_elements, macs
    if k is LayerKind.RELU:
        return out_elements, 0
    if k is LayerKind.MAXPOOL2D:
        return out_elements * (layer.window * layer.window - 1), 0
    if k is LayerKind.SOFTMAX:
        return 3 * out_elements, 0
    return 0, 0


def tops_for_layer(flops: float, layer_elapsed_us: float) -> float:
    """Tera-operations per second for ``flops`` executed in ``layer_elapsed_us`` microseconds."""
    if not layer_elapsed_us > 0:
        raise ZeroElapsed("layer elapsed time must be positive")
    return flops / (layer_elapsed_us * 1e-6 * 1e12)


def _mask(families) -> int:
    bits = 0
    for metric, bit in _FAMILY_BITS.items():
        if metric in families:
            bits |= bit
    return bits


_FAMILY_BITS = {
    Metric.SPARSITY: kernels.M_SPARSITY, Metric.ZERO_COUNT: kernels.M_ZERO,
    Metric.DENSE_ACTIVITY: kernels.M_DENSE, Metric.ENTROPY: kernels.M_ENTROPY,
    Metric.FLOPS: kernels.M_FLOPS, Metric.MACS: kernels.M_MACS, Metric.TOPS: kernels.M_TOPS,
}


def _entropy_mode(layer: LayerSpec, final: bool) -> int:
    if layer.kind is LayerKind.SOFTMAX:
        return kernels.ENTROPY_PROB
    if final:
        return kernels.ENTROPY_SOFTMAX
    return kernels.ENTROPY_ABS


def compute_layer_metrics(output, layer: LayerSpec, cfg: CounterConfig, layer_index: int = 0,
                          final: bool = False, cost: Optional[tuple] = None,
                          elapsed_us: Optional[float] = None) -> LayerMetrics:
    """Evaluate every enabled family on one layer output.

    ``cost`` is ``(flops, macs)`` (see :func:`layer_cost`); when omitted it is
    derived from the output shape.  Entropy uses the output itself for a
    Softmax layer, softmax of the output for the final layer otherwise, and the
    normalized magnitude distribution for hidden layers.  Absent families are
    ``None``.
    """
    a = np.ascontiguousarray(output, dtype=np.float64).ravel()
    if a.size == 0:
        raise ShapeMismatch("layer output is empty")
    if cost is None:
        cost = _cost_from_output(layer, np.shape(output))
    if Metric.TOPS in cfg.families and cost[0] != 0:
        if elapsed_us is None:
            elapsed_us = cost[0] / DETERMINISTIC_FLOPS_PER_US
        tops_for_layer(cost[0], elapsed_us)  # raises ZeroElapsed
    row = kernels.layer_row(a, np.empty(len(TABLE_FIELDS)), layer_index, _mask(cfg.families),
                            _entropy_mode(layer, final), cost[0], cost[1], elapsed_us or 0.0)
    return _row_to_metrics(row, layer.kind.value)


def _cost_from_output(layer: LayerSpec, out_shape) -> tuple[int, int]:
    out_elements = math.prod(out_shape)
    k = layer.kind
    if k is LayerKind.DENSE:
        return layer_cost(layer, (layer.in_features,), out_shape)
    if k is LayerKind.CONV2D:
        macs = layer.kernel_h * layer.kernel_w * layer.in_channels * out_elements
        return 2 * macs + out_elements, macs
    if k is LayerKind.RELU:
        return out_elements, 0
    if k is LayerKind.MAXPOOL2D:
        return out_elements * (layer.window * layer.window - 1), 0
    if k is LayerKind.SOFTMAX:
        return 3 * out_elements, 0
    return 0, 0


def metric_flops(element_count: int, cfg: CounterConfig) -> int:
    """Synthetic cost of evaluating the enabled per-element families on one layer."""
    per_element = sum(c for m, c in FAMILY_ELEMENT_COST.items() if m in cfg.families)
    if Metric.SPARSITY in cfg.families and Metric.ZERO_COUNT in cfg.families:
        per_element -= 1  # one zero test serves both
    return element_count * per_element


# ---------------------------------------------------------------- serialization

# Numeric columns of a record's layer table, in canonical order minus layer_kind.
TABLE_FIELDS = tuple(f for f in LAYER_FIELDS if f != "layer_kind")
_TABLE_INT = tuple(int(f in _INT_FIELDS) for f in TABLE_FIELDS)


def _row_to_metrics(row, kind: str) -> LayerMetrics:
    values = {}
    for name, v, is_int in zip(TABLE_FIELDS, row, _TABLE_INT):
        if v != v:
            values[name] = None
        else:
            values[name] = int(v) if is_int else float(v)
    return LayerMetrics(layer_kind=kind, **values)


def _metrics_to_row(m: LayerMetrics) -> list:
    out = []
    for name in TABLE_FIELDS:
        v = getattr(m, name)
        out.append(math.nan if v is None else float(v))
    return out


_CHECKSUM_TAIL = re.compile(rb',"checksum":(0|[1-9][0-9]{0,19})\}$')


class TraceRecord:
    """One inference's counter capture.

    Per-layer values live in ``table`` (one row per captured layer, columns
    ``TABLE_FIELDS``, NaN for absent families); :attr:`layers` exposes them as
    :class:`LayerMetrics`.  Records are immutable.
    """

    __slots__ = ("input_id", "model_name", "kinds", "table", "inference_time_us", "throughput_ips",
                 "checksum", "_body")

    def __init__(self, input_id: str, model_name: str, kinds, table, inference_time_us: int,
                 throughput_ips: Optional[float], checksum: int = 0):
        table = np.array(table, dtype=np.float64).reshape(-1, len(TABLE_FIELDS))
        table.setflags(write=False)
        kinds = tuple(str(k) for k in kinds)
        if len(kinds) != len(table):
            raise ValueError("one layer kind per table row required")
        if int(inference_time_us) < 0:
            raise ValueError("inference_time_us must be non-negative")
        set_ = object.__setattr__
        set_(self, "input_id", str(input_id))
        set_(self, "model_name", str(model_name))
        set_(self, "kinds", kinds)
        set_(self, "table", table)
        set_(self, "inference_time_us", int(inference_time_us))
        set_(self, "throughput_ips", None if throughput_ips is None else float(throughput_ips))
        set_(self, "checksum", int(checksum))
        set_(self, "_body", None)

    def __setattr__(self, name, value):
        raise AttributeError("TraceRecord is immutable")

    @classmethod
    def from_layers(cls, input_id, model_name, layers: Sequence[LayerMetrics], inference_time_us,
                    throughput_ips, checksum: int = 0) -> "TraceRecord":
        table = [_metrics_to_row(m) for m in layers]
        return cls(input_id, model_name, [m.layer_kind for m in layers], table, inference_time_us,
                   throughput_ips, checksum)

    @property
    def layers(self) -> tuple:
        return tuple(_row_to_metrics(row, kind) for row, kind in zip(self.table, self.kinds))

    def replace(self, **changes) -> "TraceRecord":
        fields_ = {name: getattr(self, name) for name in
                   ("input_id", "model_name", "kinds", "table", "inference_time_us", "throughput_ips", "checksum")}
        if "layers" in changes:
            layers = changes.pop("layers")
            fields_["kinds"] = [m.layer_kind for m in layers]
            fields_["table"] = [_metrics_to_row(m) for m in layers]
        fields_.update(changes)
        return TraceRecord(**fields_)

    def __eq__(self, other):
        if not isinstance(other, TraceRecord):
            return NotImplemented
        return self.to_line() == other.to_line()

    def __hash__(self):
        return hash(self.to_line())

    def __repr__(self):
        return f"TraceRecord(input_id={self.input_id!r}, layers={len(self.kinds)}, checksum={self.checksum})"

    def _prefix(self) -> bytes:
        """Canonical serialization up to (not including) the checksum digits."""
        body = self._body
        if body is None:
            layers = kernels.format_layers(self.table, [k.encode("ascii") for k in self.kinds])
            tp = math.nan if self.throughput_ips is None else self.throughput_ips
            body = b"".join((
                b'{"input_id":', json.dumps(self.input_id, ensure_ascii=True).encode("ascii"),
                b',"model_name":', json.dumps(self.model_name, ensure_ascii=True).encode("ascii"),
                b',"layers":[', layers,
                b'],"inference_time_us":', str(self.inference_time_us).encode("ascii"),
                b',"throughput_ips":', kernels.format_number(tp, False),
                b',"checksum":',
            ))
            object.__setattr__(self, "_body", body)
        return body

    def canonical_bytes(self, checksum: Optional[int] = None) -> bytes:
        value = self.checksum if checksum is None else checksum
        return self._prefix() + str(int(value)).encode("ascii") + b"}"

    def canonical_line(self, checksum: Optional[int] = None) -> str:
        """One-line JSON in canonical field order; ``checksum`` overrides the stored value."""
        return self.canonical_bytes(checksum).decode("ascii")

    def compute_checksum(self) -> int:
        return kernels.fnv1a64(self._prefix() + b"0}")

    def sealed(self) -> "TraceRecord":
        out = self.replace(checksum=self.compute_checksum())
        object.__setattr__(out, "_body", self._body)
        return out

    def _seal(self) -> "TraceRecord":
        # Only for records not yet shared: stamps the checksum without a copy.
        object.__setattr__(self, "checksum", self.compute_checksum())
        return self

    def to_line(self) -> str:
        return self.canonical_line()

    def metric(self, layer_index: int, name: str):
        """Value of ``name`` for ``layer_index``; index -1 addresses record-level fields."""
        if layer_index == -1:
            return getattr(self, name)
        col = TABLE_FIELDS.index(name)
        for row in self.table:
            if row[0] == layer_index:
                v = row[col]
                if v != v:
                    return None
                return int(v) if _TABLE_INT[col] else float(v)
        raise KeyError((layer_index, name))

    @classmethod
    def from_dict(cls, d: dict) -> "TraceRecord":
        try:
            kinds, table = [], []
            for item in d["layers"]:
                if list(item) != list(LAYER_FIELDS):
                    raise FormatError(f"layer fields {list(item)} not in canonical order")
                kinds.append(str(item["layer_kind"]))
                row = []
                for name in TABLE_FIELDS:
                    v = item[name]
                    if isinstance(v, bool) or not (v is None or isinstance(v, (int, float))):
                        raise FormatError(f"{name} must be numeric or null")
                    row.append(math.nan if v is None else float(v))
                table.append(row)
            tp = d["throughput_ips"]
            return cls(d["input_id"], d["model_name"], kinds, table, int(d["inference_time_us"]),
                       None if tp is None else float(tp), int(d["checksum"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed trace record: {exc!r}") from exc

    @classmethod
    def from_line(cls, line, verify: bool = True) -> "TraceRecord":
        raw = line.encode("ascii", "replace") if isinstance(line, str) else bytes(line)
        raw = raw.rstrip(b"\n")
        if verify and not verify_line(raw):
            raise IntegrityError("trace line failed checksum verification")
        try:
            d = json.loads(raw)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"trace line is not JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise FormatError("trace line is not a JSON object")
        return cls.from_dict(d)


def verify_record(record: TraceRecord) -> bool:
    """True iff the stored checksum equals the checksum of the canonical serialization."""
    return record.checksum == record.compute_checksum()


def verify_line(line) -> bool:
    """Byte-level check of a serialized record: hash of the line with its checksum text set to ``0``."""
    raw = line.encode("ascii", "replace") if isinstance(line, str) else bytes(line)
    raw = raw.rstrip(b"\n")
    m = _CHECKSUM_TAIL.search(raw)
    if m is None:
        return False
    stored = int(m.group(1))
    if stored >= 1 << 64:
        return False
    return kernels.fnv1a64(raw[:m.start(1)] + b"0}") == stored


def write_traces(path, records: Iterable[TraceRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for r in records:
            fh.write(r.to_line() + "\n")
    return path


def read_traces(path, verify: bool = True) -> list[TraceRecord]:
    records = []
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(TraceRecord.from_line(line, verify=verify))
            except IntegrityError as exc:
                raise IntegrityError(f"{path}:{lineno}: {exc}") from exc
            except FormatError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return records


# ---------------------------------------------------------------- memory + FSM

class FsmState(str, enum.Enum):
    IDLE = "Idle"
    ARMED = "Armed"
    CAPTURING = "Capturing"
    COMMITTING = "Committing"


class ApcMemory:
    """Append-only record store driven by the capture state machine."""

    def __init__(self, capacity: int = 1 << 20):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._records: list[TraceRecord] = []
        self.state = FsmState.IDLE
        self.transitions: list[FsmState] = []

    def __len__(self):
        return len(self._records)

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    def _move(self, expected: FsmState, new: FsmState):
        if self.state is not expected:
            raise FsmViolation(f"cannot go {self.state.value} -> {new.value}; expected {expected.value}")
        self.state = new
        self.transitions.append(new)

    def arm(self):
        if self.state is FsmState.IDLE and len(self._records) >= self.capacity:
            raise MemoryFull(f"trace memory full ({self.capacity} records)")
        self._move(FsmState.IDLE, FsmState.ARMED)

    def start_capture(self):
        self._move(FsmState.ARMED, FsmState.CAPTURING)

    def begin_commit(self):
        self._move(FsmState.CAPTURING, FsmState.COMMITTING)

    def append(self, record: TraceRecord):
        if self.state is not FsmState.COMMITTING:
            raise FsmViolation(f"append requires Committing, state is {self.state.value}")
        if not verify_record(record):
            raise IntegrityError("refusing to commit a record with a bad checksum")
        self._records.append(record)
        self._move(FsmState.COMMITTING, FsmState.IDLE)

    def abort(self):
        """Drop an in-flight capture and return to Idle."""
        if self.state is not FsmState.IDLE:
            self.state = FsmState.IDLE
            self.transitions.append(FsmState.IDLE)

    def serialize(self) -> bytes:
        return "".join(r.to_line() + "\n" for r in self._records).encode("ascii")

    def export(self, path) -> Path:
        return write_traces(path, self._records)


class CounterArray:
    """Counters bound to one model: static layer costs are computed once."""

    def __init__(self, model, cfg: CounterConfig = CounterConfig(), timing: str = DETERMINISTIC):
        if timing not in TIMING_MODES:
            raise ValueError(f"timing must be one of {TIMING_MODES}")
        self.model = model
        self.cfg = cfg
        self.timing = timing
        layers = model.spec.layers
        shapes = model.spec.shapes()
        self.costs = [layer_cost(l, shapes[i], shapes[i + 1]) for i, l in enumerate(layers)]
        self.selected = set(cfg.selected_layers(len(layers)))
        self.element_counts = [math.prod(s) for s in shapes[1:]]
        final = len(layers) - 1
        self.entropy_modes = [_entropy_mode(l, i == final) for i, l in enumerate(layers)]
        self.mask = _mask(cfg.families)
        self.throughput = Metric.THROUGHPUT in cfg.families
        order = sorted(self.selected)
        self.rows = order
        self.row_of = [order.index(i) if i in self.selected else -1 for i in range(len(layers))]
        self.kinds = tuple(layers[i].kind.value for i in order)
        # A Flatten output holds the previous layer's values, so its row is a copy
        # of that row with the layer's own index and (zero) cost columns.
        self.copy_from = [-1] * len(layers)
        for i, l in enumerate(layers):
            if (l.kind is LayerKind.FLATTEN and i > 0 and i - 1 in self.selected
                    and self.entropy_modes[i] == self.entropy_modes[i - 1]):
                self.copy_from[i] = self.row_of[i - 1]
        zero = lambda metric: 0.0 if metric in cfg.families else math.nan
        self.free_cost = (zero(Metric.FLOPS), zero(Metric.MACS), zero(Metric.TOPS))
        self.deterministic_time_us = int(round(self.model_flops / DETERMINISTIC_FLOPS_PER_US))

    @property
    def model_flops(self) -> int:
        return sum(f for f, _ in self.costs)

    @property
    def counter_flops(self) -> int:
        return sum(metric_flops(self.element_counts[i], self.cfg) for i in sorted(self.selected))

    def capture(self, x, memory: ApcMemory, input_id: str) -> tuple[int, np.ndarray, TraceRecord]:
        """Hooked inference: returns ``(prediction, probabilities, record)``."""
        memory.arm()
        try:
            memory.start_capture()
            table = np.empty((len(self.rows), len(TABLE_FIELDS)))
            elapsed_ns = []
            costs, modes, mask = self.costs, self.entropy_modes, self.mask
            wall = self.timing == WALLCLOCK
            row_of, copy_from, free_cost = self.row_of, self.copy_from, self.free_cost
            layer_row = kernels.layer_row

            def hook(i, layer, out, ns):
                elapsed_ns.append(ns)
                r = row_of[i]
                if r < 0:
                    return
                src = copy_from[i]
                if src >= 0:
                    table[r] = table[src]
                    table[r, 0] = i
                    table[r, 7:10] = free_cost
                else:
                    flops = costs[i][0]
                    el = max(ns, 1) / 1e3 if wall else flops / DETERMINISTIC_FLOPS_PER_US
                    layer_row(out.reshape(-1), table[r], i, mask, modes[i], flops, costs[i][1], el)

            outputs = self.model.forward(x, hook=hook)
            probs = self.model.probabilities_from_outputs(outputs)
            prediction = int(np.argmax(probs))
            memory.begin_commit()
            if wall:
                time_us = int(round(sum(elapsed_ns) / 1e3))
            else:
                time_us = self.deterministic_time_us
            throughput = None
            if self.throughput and time_us > 0:
                throughput = 1e6 / time_us
            record = TraceRecord(input_id, self.model.name, self.kinds, table, time_us, throughput)._seal()
            memory.append(record)
        except BaseException:
            memory.abort()
            raise
        return prediction, probs, record


def hooked_inference(model, x, cfg: CounterConfig, memory: ApcMemory, input_id: str,
                     timing: str = DETERMINISTIC) -> tuple[int, TraceRecord]:
    """Run one inference with counters attached; the record is committed to ``memory``."""
    if memory.state is not FsmState.IDLE:
        raise FsmViolation(f"hooked inference requires Idle, state is {memory.state.value}")
    prediction, _, record = CounterArray(model, cfg, timing).capture(x, memory, input_id)
    return prediction, record


def capture_traces(model, inputs, ids: Sequence[str], cfg: CounterConfig = CounterConfig(),
                   timing: str = DETERMINISTIC, memory: Optional[ApcMemory] = None) -> list[TraceRecord]:
    """Hooked inference over a sequence of inputs, one committed record each."""
    if len(inputs) != len(ids):
        raise ValueError("one id per input required")
    counters = CounterArray(model, cfg, timing)
    memory = memory if memory is not None else ApcMemory(max(1, len(ids)))
    return [counters.capture(x, memory, str(i))[2] for x, i in zip(inputs, ids)]
