"""DeepFool adversarial examples and the empirical robustness estimate.

Each DeepFool step linearizes the logit differences around the current point,
moves to the nearest linearized boundary, and repeats until the label flips.
The accumulated step is scaled by ``1 + overshoot`` so the final point lands
just past the boundary.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import binio
from .errors import ApcError, DegenerateGradient, ShapeMismatch
from .network import LabeledDataset, TrainedModel
from .tensor import GradientTape, backward, forward_batch

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    overshoot: float = 0.02
    max_iterations: int = 50
    candidate_class_count: int = 10
    clip: Optional[tuple] = None  # (low, high) input range, off by default

    def __post_init__(self):
        if not 0.0 < self.overshoot < 1.0:
            raise ValueError("overshoot must lie in (0, 1)")
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be >= 1")
        if int(self.candidate_class_count) < 2:
            raise ValueError("candidate_class_count must be >= 2")
        if self.clip is not None:
            lo, hi = (float(v) for v in self.clip)
            if not lo < hi:
                raise ValueError("clip range must satisfy low < high")
            object.__setattr__(self, "clip", (lo, hi))

    def to_dict(self) -> dict:
        return {"overshoot": self.overshoot, "max_iterations": self.max_iterations,
                "candidate_class_count": self.candidate_class_count,
                "clip": None if self.clip is None else list(self.clip)}

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "AttackConfig":
        d = dict(d or {})
        if d.get("clip") is not None:
            d["clip"] = tuple(d["clip"])
        return cls(**d)


class AttackStatus(str, enum.Enum):
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    SKIPPED = "skipped"  # misclassified before the attack


@dataclass(frozen=True)
class AttackResult:
    input_id: str
    original_input: np.ndarray
    adversarial_input: np.ndarray
    perturbation: np.ndarray
    perturbation_norm: float
    original_label: int
    adversarial_label: int
    iterations_used: int
    status: AttackStatus
    error: Optional[str] = None

    @property
    def succeeded(self) -> bool:
        return self.status is AttackStatus.SUCCEEDED

    @property
    def norm_ratio(self) -> float:
        base = float(np.linalg.norm(self.original_input))
        return self.perturbation_norm / base if base > 0 else float("inf")

    def to_json(self) -> dict:
        ratio = self.norm_ratio
        return {"input_id": self.input_id, "perturbation_norm": self.perturbation_norm,
                "norm_ratio": ratio if np.isfinite(ratio) else None, "iterations": self.iterations_used,
                "succeeded": self.succeeded, "status": self.status.value, "error": self.error,
                "original_label": self.original_label, "adversarial_label": self.adversarial_label}


@dataclass(frozen=True)
class RobustnessReport:
    """Empirical robustness: mean of ``||p|| / ||a||`` over succeeded samples (None when there are none)."""

    ratios: tuple
    rho_adv: Optional[float]
    sample_count: int
    failure_count: int
    skipped_count: int

    @classmethod
    def from_results(cls, results: Sequence[AttackResult]) -> "RobustnessReport":
        ratios = tuple(r.norm_ratio for r in results if r.succeeded)
        rho = float(np.mean(ratios)) if ratios else None
        failed = sum(r.status is AttackStatus.FAILED for r in results)
        skipped = sum(r.status is AttackStatus.SKIPPED for r in results)
        return cls(ratios, rho, len(results), failed, skipped)

    @property
    def success_count(self) -> int:
        return len(self.ratios)

    def to_dict(self) -> dict:
        return {"rho_adv": self.rho_adv, "sample_count": self.sample_count,
                "success_count": self.success_count, "failure_count": self.failure_count,
                "skipped_count": self.skipped_count}


def _label(model: TrainedModel, x: np.ndarray) -> int:
    outs = forward_batch(model.spec.layers, model.weights, x[None])
    return int(np.argmax(outs[model.spec.logits_index][0]))


def logit_jacobian(model: TrainedModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits at ``x`` and their gradients with respect to ``x`` (shape ``(classes, *x.shape)``)."""
    upto = model.spec.logits_index
    classes = model.spec.shapes()[upto + 1][0]
    tape = GradientTape()
    outs = forward_batch(model.spec.layers, model.weights, np.repeat(x[None], classes, axis=0), tape=tape)
    grads = backward(tape, np.eye(classes), upto=upto, batched=True)
    return outs[upto][0], grads.input


def deepfool(model: TrainedModel, x, cfg: AttackConfig = AttackConfig(), input_id: str = "") -> AttackResult:
    """Minimal-L2 perturbation that changes the model's label, by iterative linearization."""
    x0 = np.asarray(x, dtype=np.float64)
    if x0.shape != model.spec.input_shape:
        raise ShapeMismatch(f"input shape {x0.shape} != model input {model.spec.input_shape}")
    if not np.isfinite(x0).all():
        raise ValueError("input must be finite")
    logits0, _ = logit_jacobian(model, x0)
    k0 = int(np.argmax(logits0))
    k = min(int(cfg.candidate_class_count), logits0.size)
    candidates = [int(c) for c in np.argsort(-logits0, kind="stable")[:k] if c != k0]
    scale = 1.0 + cfg.overshoot
    r_tot = np.zeros_like(x0)
    perturbation = np.zeros_like(x0)
    x_i = x0
    label = k0
    iterations = 0
    while label == k0 and iterations < cfg.max_iterations:
        logits, jac = logit_jacobian(model, x_i)
        best, best_dist = None, np.inf
        for c in candidates:
            w = jac[c] - jac[k0]
            w_norm = float(np.linalg.norm(w))
            if w_norm < DEGENERATE_NORM:
                continue
            dist = abs(logits[c] - logits[k0]) / w_norm
            if dist < best_dist:
                best, best_dist = (w, w_norm, logits[c] - logits[k0]), dist
        if best is None:
            raise DegenerateGradient("all candidate logit differences have vanishing gradients")
        w, w_norm, f = best
        r_tot = r_tot + (abs(f) / (w_norm * w_norm)) * w
        perturbation = scale * r_tot
        if cfg.clip is not None:
            perturbation = np.clip(x0 + perturbation, *cfg.clip) - x0
        # The evaluated point is exactly x0 + p so the reported label is the label of x_adv.
        x_i = x0 + perturbation
        iterations += 1
        label = _label(model, x_i)
    status = AttackStatus.SUCCEEDED if label != k0 else AttackStatus.FAILED
    return AttackResult(input_id, x0, x_i, perturbation, float(np.linalg.norm(perturbation)),
                        k0, label, iterations, status)


def _not_attacked(input_id, x, label, status, error=None) -> AttackResult:
    x = np.asarray(x, dtype=np.float64)
    return AttackResult(input_id, x, x.copy(), np.zeros_like(x), 0.0, label, label, 0, status, error)


def attack_dataset(model: TrainedModel, data: LabeledDataset,
                   cfg: AttackConfig = AttackConfig()) -> tuple[list[AttackResult], RobustnessReport]:
    """DeepFool every sample; misclassified samples are skipped, per-sample errors become failures."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    results = []
    for input_id, x, y in zip(data.ids, data.inputs, data.labels):
        predicted = _label(model, x)
        if predicted != int(y):
            results.append(_not_attacked(input_id, x, predicted, AttackStatus.SKIPPED))
            continue
        try:
            results.append(deepfool(model, x, cfg, input_id))
        except (ApcError, ValueError, ArithmeticError) as exc:
            log.warning("attack on %s failed: %s", input_id, exc)
            results.append(_not_attacked(input_id, x, predicted, AttackStatus.FAILED, str(exc)))
    return results, RobustnessReport.from_results(results)


def export_results(results: Sequence[AttackResult], jsonl_path, tensors_path=None) -> Path:
    """JSON Lines summary plus, optionally, the adversarial inputs in the tensor container."""
    jsonl_path = Path(jsonl_path)
    jsonl_path.parent.mkdir(parents=True, exist_ok=True)
    with open(jsonl_path, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            fh.write(binio.canonical_json(r.to_json()) + "\n")
    if tensors_path is not None:
        binio.save_tensors(tensors_path, [r.input_id for r in results], [r.adversarial_input for r in results],
                           {"original_labels": [r.original_label for r in results],
                            "adversarial_labels": [r.adversarial_label for r in results],
                            "status": [r.status.value for r in results]})
    return jsonl_path
