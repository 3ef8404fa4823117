"""Expert-as-judge accuracy, confusion matrices, SSIM diversity and seed sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from .expert import Expert, classify
from .ssim import DEFAULT_PARAMS, SSIMParams, pairwise_ssim, to_unit_range


class EvaluationError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: List[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise EvaluationError("empty confusion matrix")
        return self.correct / self.total

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, list(self.class_names))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + list(self.class_names))
        for name, row in zip(self.class_names, self.counts):
            w.writerow([name] + [int(v) for v in row])
        return buf.getvalue()


def confusion_from_predictions(labels, predictions, class_names: Sequence[str]) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    n = len(class_names)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise EvaluationError(f"label out of range [0, {n})")
    if predictions.size and (predictions.min() < 0 or predictions.max() >= n):
        raise EvaluationError(f"prediction out of range [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts, list(class_names))


def confusion(expert: Expert, images, labels, class_names: Sequence[str]) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    n = len(class_names)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise EvaluationError(f"label out of range [0, {n})")
    return confusion_from_predictions(labels, classify(expert, images), class_names)


def generation_accuracy(expert: Expert, images, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EvaluationError("cannot score an empty image set")
    return accuracy_from_predictions(labels, classify(expert, images))


def accuracy_from_predictions(labels, predictions) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EvaluationError("cannot score an empty image set")
    return int((np.asarray(predictions) == labels).sum()) / labels.size


def class_ssim(images, params: SSIMParams = DEFAULT_PARAMS) -> float:
    """Mean SSIM over all unordered pairs of one class ([0, 1] images)."""
    images = np.asarray(images)
    if images.shape[0] < 2:
        raise EvaluationError("SSIM diversity needs at least 2 images per class")
    return float(math.fsum(pairwise_ssim(images, params)) / (images.shape[0] * (images.shape[0] - 1) // 2))


@dataclass
class SSIMDiversity:
    per_class: Dict[str, float]
    overall: float


def ssim_diversity(groups: Mapping[str, np.ndarray],
                   params: SSIMParams = DEFAULT_PARAMS) -> SSIMDiversity:
    """Per-class mean pairwise SSIM and their unweighted mean.

    ``groups`` maps class names to [0, 1] image stacks. Lower is more diverse.
    """
    if not groups:
        raise EvaluationError("no classes to score")
    per_class = {}
    for name in groups:
        if np.asarray(groups[name]).shape[0] < 2:
            raise EvaluationError(f"class {name!r} has fewer than 2 images")
        per_class[name] = class_ssim(groups[name], params)
    overall = math.fsum(per_class.values()) / len(per_class)
    return SSIMDiversity(per_class, overall)


def group_by_class(images, labels, class_names: Sequence[str],
                   exclude: Sequence[int] = ()) -> Dict[str, np.ndarray]:
    images = np.asarray(images)
    labels = np.asarray(labels)
    return {class_names[c]: images[labels == c] for c in range(len(class_names))
            if c not in exclude and (labels == c).any()}


@dataclass
class SeedResult:
    seed: int
    accuracy: float
    correct: int
    total: int
    ssim_overall: float
    ssim_per_class: Dict[str, float]
    confusion: ConfusionMatrix


def evaluate_images(expert: Expert, images, labels, class_names: Sequence[str], seed: int,
                    params: SSIMParams = DEFAULT_PARAMS) -> SeedResult:
    """Score one seed's generations. ``images`` are in diffusion space [-1, 1]."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    cm = confusion(expert, images, labels, class_names)
    div = ssim_diversity(group_by_class(to_unit_range(images), labels, class_names), params)
    return SeedResult(seed, cm.accuracy, cm.correct, cm.total, div.overall, div.per_class, cm)


@dataclass
class EvalReport:
    name: str
    per_seed: List[SeedResult]
    meta: Dict = field(default_factory=dict)
    ssim_params: SSIMParams = DEFAULT_PARAMS

    @property
    def accuracies(self) -> List[float]:
        return [r.accuracy for r in self.per_seed]

    @property
    def mean_accuracy(self) -> float:
        return math.fsum(self.accuracies) / len(self.per_seed)

    @property
    def confusion(self) -> ConfusionMatrix:
        cm = self.per_seed[0].confusion
        for r in self.per_seed[1:]:
            cm = cm + r.confusion
        return cm

    @property
    def ssim_per_class(self) -> Dict[str, float]:
        names = list(self.per_seed[0].ssim_per_class)
        return {n: math.fsum(r.ssim_per_class[n] for r in self.per_seed) / len(self.per_seed)
                for n in names}

    @property
    def ssim_overall(self) -> float:
        per_class = self.ssim_per_class
        return math.fsum(per_class.values()) / len(per_class)

    def to_dict(self) -> dict:
        acc = self.accuracies
        return {
            "name": self.name,
            "meta": self.meta,
            "seeds": [r.seed for r in self.per_seed],
            "per_seed_accuracy": acc,
            "mean_accuracy": self.mean_accuracy,
            "min_accuracy": min(acc),
            "max_accuracy": max(acc),
            "confusion": {"class_names": self.confusion.class_names,
                          "counts": self.confusion.counts.tolist()},
            "ssim_per_class": self.ssim_per_class,
            "ssim_overall": self.ssim_overall,
            "ssim_overall_per_seed": [r.ssim_overall for r in self.per_seed],
            "ssim_params": self.ssim_params.to_dict(),
        }


PER_SEED_FIELDS = ["model", "seed", "accuracy", "correct", "total", "ssim_overall"]


def per_seed_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PER_SEED_FIELDS)
    for rep in reports:
        for r in rep.per_seed:
            w.writerow([rep.name, r.seed, repr(r.accuracy), r.correct, r.total,
                        repr(r.ssim_overall)])
    return buf.getvalue()
