"""``apcsim`` command line: the train / extract / attack / detect pipeline staged as files.

Every command reads an experiment configuration (JSON) and writes its artifacts
into the output directory.  Exit codes: 0 success, 1 usage or configuration
error, 2 data or format error, 3 halted by the monitoring policy.
"""
from __future__ import annotations

import functools
import json
import logging
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import click

from . import binio
from .apc import (
    DETERMINISTIC, DETERMINISTIC_FLOPS_PER_US, TIMING_MODES, WALLCLOCK, ApcMemory, CounterArray, CounterConfig,
    capture_traces, read_traces, verify_line, write_traces,
)
from .attack import AttackConfig, attack_dataset, export_results
from .datasets import load_csv, load_mnist_idx, make_blobs
from .errors import ApcError
from .network import (
    BUILTIN_SPECS, LabeledDataset, ModelSpec, TrainConfig, TrainedModel, accuracy, load_model, predict,
    save_model, train_model,
)
from .tanto import (
    Action, DetectorConfig, DetectorKind, Monitor, Policy, build_dataset, evaluate_detector, infer_and_detect,
    load_detector, save_detector, split_dataset, train_detector, write_alerts,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_HALTED = 0, 1, 2, 3

SOURCES = ("mnist-idx", "csv", "synthetic-blobs")
SPLITS = ("train", "test")
MIN_BENCH_INPUTS = 30
MIN_BENCH_REPETITIONS = 5

MODEL_FILE = "model.apcm"
CLEAN_TRACES = "traces_clean.jsonl"
ADV_TRACES = "traces_adversarial.jsonl"
ADV_TENSORS = "adversarial.apct"
ATTACK_RESULTS = "attack_results.jsonl"
ROBUSTNESS = "robustness.json"
DETECTOR_FILE = "detector.apcd"
DETECTOR_METRICS = "detector_metrics.json"
EVALUATION = "evaluation.json"
ALERTS = "alerts.jsonl"
OVERHEAD = "overhead.json"


class DataError(click.ClickException):
    exit_code = EXIT_DATA


class ConfigError(click.UsageError):
    exit_code = EXIT_USAGE


# ---------------------------------------------------------------- configuration

_DATASET_PATH_KEYS = {
    "mnist-idx": ("train_images", "train_labels", "test_images", "test_labels"),
    "csv": ("train_csv", "test_csv"),
    "synthetic-blobs": (),
}
_DATASET_DEFAULTS = {
    "mnist-idx": {"train_limit": None, "test_limit": None},
    "csv": {"input_shape": None, "class_count": None, "scale": 1.0},
    "synthetic-blobs": {"n_train": 200, "n_test": 100, "sigma": 0.3, "classes": 2},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one pipeline run needs; relative paths resolve against the config file."""

    seed: int
    model: str = "blobs-mlp"  # built-in name or path to a JSON model spec
    dataset: dict = field(default_factory=lambda: {"source": "synthetic-blobs"})
    train: TrainConfig = TrainConfig(epochs=50, learning_rate=0.1)
    counters: CounterConfig = CounterConfig()
    attack: AttackConfig = AttackConfig()
    detector_kind: DetectorKind = DetectorKind.LOGISTIC_REGRESSION
    detector: DetectorConfig = DetectorConfig()
    test_fraction: float = 0.2
    attack_limit: Optional[int] = None
    out: Path = Path("runs")
    timing: str = DETERMINISTIC
    base_dir: Path = Path(".")

    KEYS = ("seed", "model", "dataset", "train", "counters", "attack", "detector_kind", "detector",
            "test_fraction", "attack_limit", "out", "timing")

    @classmethod
    def from_dict(cls, d: dict, base_dir=Path("."), seed=None, timing=None, out=None) -> "ExperimentConfig":
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = d.get("seed") if seed is None else seed
        if seed is None:
            raise ConfigError('a seed is required: pass --seed or set "seed" in the config')
        try:
            seed = int(seed)
            if not 0 <= seed < 1 << 64:
                raise ValueError("seed must fit in an unsigned 64-bit integer")
            base_dir = Path(base_dir)
            dataset = dict(d.get("dataset") or {"source": "synthetic-blobs"})
            source = dataset.get("source")
            if source not in SOURCES:
                raise ValueError(f"dataset source must be one of {SOURCES}, got {source!r}")
            dataset = {**_DATASET_DEFAULTS[source], **dataset}
            for key in _DATASET_PATH_KEYS[source]:
                if key not in dataset:
                    raise ValueError(f"dataset source {source} needs {key!r}")
                dataset[key] = str(base_dir / dataset[key])
            train = {"epochs": 50, "learning_rate": 0.1, **(d.get("train") or {})}
            timing = timing or d.get("timing") or DETERMINISTIC
            if timing not in TIMING_MODES:
                raise ValueError(f"timing must be one of {TIMING_MODES}")
            model = str(d.get("model", "blobs-mlp"))
            if model not in BUILTIN_SPECS:
                model = str(base_dir / model)
            limit = d.get("attack_limit")
            return cls(
                seed=seed, model=model, dataset=dataset,
                train=TrainConfig(int(train["epochs"]), float(train["learning_rate"]),
                                  int(train.get("batch_size", 16)), seed),
                counters=CounterConfig.from_dict(d.get("counters")),
                attack=AttackConfig.from_dict(d.get("attack")),
                detector_kind=DetectorKind(d.get("detector_kind", DetectorKind.LOGISTIC_REGRESSION.value)),
                detector=DetectorConfig.from_dict(d.get("detector")),
                test_fraction=float(d.get("test_fraction", 0.2)),
                attack_limit=None if limit is None else int(limit),
                out=Path(out) if out is not None else base_dir / d.get("out", "runs"),
                timing=timing, base_dir=base_dir,
            )
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path: Optional[Path], **overrides) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({}, Path("."), **overrides)
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(f"{path}: config file not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d, Path(path).parent, **overrides)

    def referenced_paths(self) -> list[Path]:
        paths = [Path(self.dataset[k]) for k in _DATASET_PATH_KEYS[self.dataset["source"]]]
        if self.model not in BUILTIN_SPECS:
            paths.append(Path(self.model))
        return paths

    def check_paths(self):
        for p in self.referenced_paths():
            if not p.exists():
                raise DataError(f"{p}: referenced path does not exist")

    def model_spec(self) -> ModelSpec:
        if self.model in BUILTIN_SPECS:
            return BUILTIN_SPECS[self.model]()
        return ModelSpec.from_json(self.model)

    @property
    def dataset_name(self) -> str:
        return self.dataset["source"]


def load_split(cfg: ExperimentConfig, split: str) -> LabeledDataset:
    """The ``train`` or ``test`` portion of the configured dataset source."""
    ds = cfg.dataset
    source = ds["source"]
    if source == "synthetic-blobs":
        n = int(ds["n_train"] if split == "train" else ds["n_test"])
        return make_blobs(n, float(ds["sigma"]), cfg.seed + (split == "test"), int(ds["classes"]))
    if source == "mnist-idx":
        return load_mnist_idx(ds[f"{split}_images"], ds[f"{split}_labels"], ds[f"{split}_limit"])
    shape = ds["input_shape"]
    return load_csv(ds[f"{split}_csv"], None if shape is None else tuple(shape), ds["class_count"],
                    float(ds["scale"]))


# ---------------------------------------------------------------- overhead report

@dataclass(frozen=True)
class OverheadRow:
    model: str
    dataset: str
    baseline_s: float
    instrumented_s: float
    detector_s: float
    overhead_percent: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class OverheadReport:
    """Per-input inference times without and with counters plus detector."""

    rows: tuple
    timing: str
    n_inputs: int
    repetitions: int

    def to_dict(self) -> dict:
        return {"timing": self.timing, "n_inputs": self.n_inputs, "repetitions": self.repetitions,
                "rows": [r.to_dict() for r in self.rows]}

    def table(self) -> str:
        head = f"{'model':<14}{'dataset':<18}{'baseline s':>14}{'APC+TANTO s':>14}{'detector s':>14}{'overhead %':>12}"
        lines = [head]
        for r in self.rows:
            lines.append(f"{r.model:<14}{r.dataset:<18}{r.baseline_s:>14.6g}{r.instrumented_s:>14.6g}"
                         f"{r.detector_s:>14.6g}{r.overhead_percent:>12.2f}")
        return "\n".join(lines)


def deterministic_overhead(counters: CounterArray, detector_flops: int) -> tuple[float, float, float, float]:
    """Closed form under the synthetic clock: ``(baseline_s, instrumented_s, detector_s, percent)``."""
    model, extra = counters.model_flops, counters.counter_flops + detector_flops
    seconds = lambda flops: flops / DETERMINISTIC_FLOPS_PER_US / 1e6
    return seconds(model), seconds(model + extra), seconds(detector_flops), 100.0 * extra / model


def wallclock_overhead(model: TrainedModel, detector, inputs, cfg: CounterConfig,
                       repetitions: int) -> tuple[float, float, float, float]:
    """Median per-input seconds over ``repetitions`` passes of each loop."""
    monitor = Monitor(model, detector, cfg, WALLCLOCK)
    base, inst, det = [], [], []
    n = len(inputs)
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for x in inputs:
            predict(model, x)
        base.append((time.perf_counter() - t0) / n)
        monitor.memory = ApcMemory(n)
        t0 = time.perf_counter()
        records = [monitor.step(str(i), x)[2] for i, x in enumerate(inputs)]
        inst.append((time.perf_counter() - t0) / n)
        feats = [monitor._gather(r) for r in records]
        t0 = time.perf_counter()
        for f in feats:
            detector.scores(f)
        det.append((time.perf_counter() - t0) / n)
    b, i, d = statistics.median(base), statistics.median(inst), statistics.median(det)
    return b, i, d, (i - b) / b * 100.0


# ---------------------------------------------------------------- plumbing

def _write_json(path: Path, obj) -> Path:
    """Sorted, indented JSON; re-parsing and re-serializing reproduces the file byte for byte."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return path


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise DataError(f"{path}: {what} not found")
    return Path(path)


def _guard(fn):
    """Turn library and I/O failures into data errors (exit 2)."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except FileNotFoundError as exc:
            raise DataError(f"{exc.filename}: not found") from exc
        except (ApcError, OSError, ValueError, ArithmeticError) as exc:
            raise DataError(f"{type(exc).__name__}: {exc}") from exc
    return wrapper


@dataclass
class _Options:
    config: Optional[Path]
    seed: Optional[int]
    timing: Optional[str]
    out: Optional[Path]
    _experiment: Optional[ExperimentConfig] = None

    def experiment(self) -> ExperimentConfig:
        if self._experiment is None:
            cfg = ExperimentConfig.load(self.config, seed=self.seed, timing=self.timing, out=self.out)
            cfg.check_paths()
            cfg.out.mkdir(parents=True, exist_ok=True)
            self._experiment = cfg
        return self._experiment


def _exp(ctx: click.Context) -> ExperimentConfig:
    return ctx.obj.experiment()


def _artifact(cfg: ExperimentConfig, given: Optional[Path], default: str) -> Path:
    return Path(given) if given is not None else cfg.out / default


class _Cli(click.Group):
    """Click group with this tool's exit-code convention (usage errors exit 1, not 2)."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = rv if isinstance(rv, int) else EXIT_OK
        except click.UsageError as exc:
            exc.show()
            code = EXIT_USAGE
        except click.ClickException as exc:
            exc.show()
            code = exc.exit_code
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = EXIT_USAGE
        if standalone_mode:
            sys.exit(code)
        return code


@click.group(cls=_Cli)
@click.option("--config", "config_path", type=click.Path(path_type=Path), help="Experiment config (JSON).")
@click.option("--seed", type=click.IntRange(0, (1 << 64) - 1), help="Overrides the config seed.")
@click.option("--timing", type=click.Choice(TIMING_MODES), help="Trace timing mode (default deterministic).")
@click.option("--out", type=click.Path(path_type=Path), help="Output directory for artifacts.")
@click.option("-v", "--verbose", count=True, help="-v for info, -vv for debug logging.")
@click.pass_context
def main(ctx, config_path, seed, timing, out, verbose):
    """Activation performance counters, DeepFool attacks and trace-based detection."""
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    ctx.obj = _Options(config_path, seed, timing, out)


_split_option = click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
_model_option = click.option("--model", "model_path", type=click.Path(path_type=Path),
                             help=f"Model file (default <out>/{MODEL_FILE}).")
_detector_option = click.option("--detector", "detector_path", type=click.Path(path_type=Path),
                                help=f"Detector file (default <out>/{DETECTOR_FILE}).")


@main.command()
@click.option("--output", type=click.Path(path_type=Path), help=f"Model file (default <out>/{MODEL_FILE}).")
@click.pass_context
@_guard
def train(ctx, output):
    """Train the configured model on the training split."""
    cfg = _exp(ctx)
    data = load_split(cfg, "train")
    model = train_model(cfg.model_spec(), data, cfg.train)
    path = save_model(model, _artifact(cfg, output, MODEL_FILE))
    click.echo(f"{'epoch':>5}  {'loss':>12}")
    for i, loss in enumerate(model.training_summary["epoch_losses"], start=1):
        click.echo(f"{i:>5}  {loss:>12.6f}")
    click.echo(f"train accuracy {accuracy(model, data):.4f}")
    click.echo(f"wrote {path}")


@main.command()
@_model_option
@_split_option
@click.option("--output", type=click.Path(path_type=Path), help=f"Trace file (default <out>/{CLEAN_TRACES}).")
@click.pass_context
@_guard
def extract(ctx, model_path, split, output):
    """Capture one clean trace record per input of a split."""
    cfg = _exp(ctx)
    model = load_model(_require(_artifact(cfg, model_path, MODEL_FILE), "model file"))
    data = load_split(cfg, split)
    records = capture_traces(model, data.inputs, data.ids, cfg.counters, cfg.timing)
    path = write_traces(_artifact(cfg, output, CLEAN_TRACES), records)
    click.echo(f"wrote {len(records)} trace records to {path}")


@main.command()
@_model_option
@_split_option
@click.option("--clip", nargs=2, type=float, default=None, help="Clip adversarial inputs to [LOW, HIGH].")
@click.pass_context
@_guard
def attack(ctx, model_path, split, clip):
    """DeepFool every input of a split; adversarial traces use the same hooked path as clean ones."""
    cfg = _exp(ctx)
    model = load_model(_require(_artifact(cfg, model_path, MODEL_FILE), "model file"))
    data = load_split(cfg, split)
    if cfg.attack_limit is not None:
        data = data.subset(range(min(cfg.attack_limit, len(data))))
    acfg = cfg.attack if clip is None else AttackConfig(**{**cfg.attack.__dict__, "clip": tuple(clip)})
    results, report = attack_dataset(model, data, acfg)
    export_results(results, cfg.out / ATTACK_RESULTS, cfg.out / ADV_TENSORS)
    won = [r for r in results if r.succeeded]
    records = capture_traces(model, [r.adversarial_input for r in won], [r.input_id for r in won],
                             cfg.counters, cfg.timing)
    write_traces(cfg.out / ADV_TRACES, records)
    summary = {**report.to_dict(), "attack": acfg.to_dict(),
               "skipped_ids": [r.input_id for r in results if r.status.value == "skipped"],
               "failed_ids": [r.input_id for r in results if r.status.value == "failed"]}
    _write_json(cfg.out / ROBUSTNESS, summary)
    rho = "n/a" if report.rho_adv is None else f"{report.rho_adv:.6f}"
    click.echo(f"{report.sample_count} inputs: {report.success_count} succeeded, "
               f"{report.failure_count} failed, {report.skipped_count} skipped; rho_adv {rho}")


@main.command("train-detector")
@click.option("--clean", type=click.Path(path_type=Path), help=f"Clean traces (default <out>/{CLEAN_TRACES}).")
@click.option("--adversarial", type=click.Path(path_type=Path),
              help=f"Adversarial traces (default <out>/{ADV_TRACES}).")
@click.option("--kind", type=click.Choice([k.value for k in DetectorKind]), help="Overrides the config.")
@click.pass_context
@_guard
def train_detector_cmd(ctx, clean, adversarial, kind):
    """Fit a detector on clean vs adversarial traces and report held-out metrics."""
    cfg = _exp(ctx)
    clean_records = read_traces(_require(_artifact(cfg, clean, CLEAN_TRACES), "clean trace file"))
    adv_records = read_traces(_require(_artifact(cfg, adversarial, ADV_TRACES), "adversarial trace file"))
    data = build_dataset(clean_records, adv_records)
    train_part, test_part = split_dataset(data, cfg.test_fraction, cfg.seed)
    kind = DetectorKind(kind) if kind else cfg.detector_kind
    detector = train_detector(train_part, kind, cfg.seed, cfg.detector)
    save_detector(detector, cfg.out / DETECTOR_FILE)
    train_m, test_m = evaluate_detector(detector, train_part), evaluate_detector(detector, test_part)
    _write_json(cfg.out / DETECTOR_METRICS, {
        "kind": kind.value, "feature_count": len(detector.layout), "detector_flops": detector.flops(),
        "train_size": len(train_part), "test_size": len(test_part),
        "train": train_m.to_dict(), "test": test_m.to_dict(),
    })
    click.echo(f"{kind.value}: train accuracy {train_m.accuracy:.4f}, held-out accuracy {test_m.accuracy:.4f} "
               f"({len(test_part)} samples)")


@main.command()
@_model_option
@_detector_option
@_split_option
@click.option("--clean", type=click.Path(path_type=Path), help=f"Clean traces (default <out>/{CLEAN_TRACES}).")
@click.option("--adversarial", type=click.Path(path_type=Path),
              help=f"Adversarial traces (default <out>/{ADV_TRACES}).")
@click.pass_context
@_guard
def evaluate(ctx, model_path, detector_path, split, clean, adversarial):
    """Model accuracy on a split and detector metrics on every given trace record."""
    cfg = _exp(ctx)
    model = load_model(_require(_artifact(cfg, model_path, MODEL_FILE), "model file"))
    detector = load_detector(_require(_artifact(cfg, detector_path, DETECTOR_FILE), "detector file"))
    data = build_dataset(read_traces(_require(_artifact(cfg, clean, CLEAN_TRACES), "clean trace file")),
                         read_traces(_require(_artifact(cfg, adversarial, ADV_TRACES), "adversarial trace file")))
    metrics = evaluate_detector(detector, data)
    model_acc = accuracy(model, load_split(cfg, split))
    _write_json(cfg.out / EVALUATION, {"model_accuracy": model_acc, "split": split,
                                       "detector": metrics.to_dict(), "trace_count": len(data)})
    click.echo(f"model accuracy ({split}) {model_acc:.4f}; detector accuracy {metrics.accuracy:.4f} "
               f"on {len(data)} traces")


@main.command()
@_model_option
@_detector_option
@click.option("--workload", type=click.Path(path_type=Path),
              help="Tensor container of inputs to monitor (default: the --split inputs).")
@_split_option
@click.option("--policy", type=click.Choice([p.value for p in Policy]), default=Policy.LOG_ONLY.value,
              show_default=True)
@click.option("--output", type=click.Path(path_type=Path), help=f"Alert log (default <out>/{ALERTS}).")
@click.pass_context
@_guard
def monitor(ctx, model_path, detector_path, workload, split, policy, output):
    """Hooked inference with online detection; exits 3 when HaltOnDetect fires."""
    cfg = _exp(ctx)
    model = load_model(_require(_artifact(cfg, model_path, MODEL_FILE), "model file"))
    detector = load_detector(_require(_artifact(cfg, detector_path, DETECTOR_FILE), "detector file"))
    if workload is not None:
        ids, tensors, _ = binio.load_tensors(_require(workload, "workload file"))
    else:
        data = load_split(cfg, split)
        ids, tensors = data.ids, data.inputs
    alerts = []
    for _, alert in infer_and_detect(model, detector, zip(ids, tensors), cfg.counters, policy, cfg.timing):
        alerts.append(alert)
        if alert.action_taken is Action.HALTED:
            break
    path = write_alerts(_artifact(cfg, output, ALERTS), alerts)
    flagged = sum(a.is_adversarial for a in alerts)
    click.echo(f"processed {len(alerts)} of {len(ids)} inputs, {flagged} flagged; alerts in {path}")
    if alerts and alerts[-1].action_taken is Action.HALTED:
        click.echo(f"halted on input {alerts[-1].input_id}", err=True)
        ctx.exit(EXIT_HALTED)


@main.command("bench-overhead")
@_model_option
@_detector_option
@_split_option
@click.option("--n-inputs", type=int, default=100, show_default=True)
@click.option("--repetitions", type=int, default=MIN_BENCH_REPETITIONS, show_default=True)
@click.pass_context
@_guard
def bench_overhead(ctx, model_path, detector_path, split, n_inputs, repetitions):
    """Inference time with and without counters plus detector.

    Wall-clock mode reports medians over the repetitions; deterministic mode
    reports the closed form of the synthetic clock.
    """
    if n_inputs < MIN_BENCH_INPUTS:
        raise ConfigError(f"--n-inputs must be >= {MIN_BENCH_INPUTS}")
    if repetitions < MIN_BENCH_REPETITIONS:
        raise ConfigError(f"--repetitions must be >= {MIN_BENCH_REPETITIONS}")
    cfg = _exp(ctx)
    model = load_model(_require(_artifact(cfg, model_path, MODEL_FILE), "model file"))
    detector = load_detector(_require(_artifact(cfg, detector_path, DETECTOR_FILE), "detector file"))
    data = load_split(cfg, split)
    if len(data) < n_inputs:
        raise DataError(f"the {split} split has {len(data)} inputs, fewer than --n-inputs {n_inputs}")
    if cfg.timing == DETERMINISTIC:
        values = deterministic_overhead(CounterArray(model, cfg.counters), detector.flops())
    else:
        values = wallclock_overhead(model, detector, data.inputs[:n_inputs], cfg.counters, repetitions)
    report = OverheadReport((OverheadRow(model.name, cfg.dataset_name, *values),), cfg.timing, n_inputs,
                            repetitions)
    _write_json(cfg.out / OVERHEAD, report.to_dict())
    click.echo(report.table())


@main.command("verify-traces")
@click.argument("files", nargs=-1, required=True, type=click.Path(path_type=Path))
@_guard
def verify_traces(files):
    """Check every record checksum; exits 2 when any line fails."""
    bad_total = 0
    for f in files:
        lines = _require(f, "trace file").read_bytes().splitlines()
        bad = [n for n, line in enumerate(lines, start=1) if not verify_line(line)]
        bad_total += len(bad)
        status = "ok" if not bad else f"{len(bad)} corrupt (lines {', '.join(map(str, bad[:10]))})"
        click.echo(f"{f}: {len(lines)} records, {status}")
    if bad_total:
        raise DataError(f"{bad_total} corrupt trace records")
