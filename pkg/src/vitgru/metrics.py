"""Confusion-matrix accumulation and every derived figure the kit reports.

Predictions come from logits with a fixed tie rule (lower class index wins),
so evaluation is deterministic even on degenerate models. The weighted recall
is computed from integer counts, which makes it equal top-1 accuracy exactly,
not just approximately.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .tensor import Tape

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class ConfusionMatrix:
    """C x C integer grid; rows are true classes, columns predicted classes."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise DataError(f"need at least one class, got {num_classes}")
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, true_label: int, pred_label: int) -> None:
        self.counts[true_label, pred_label] += 1

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts


def topk_indices(logits, k: int) -> np.ndarray:
    """Indices of the k largest logits; ties go to the lower class index."""
    logits = np.asarray(logits, dtype=np.float64)
    order = np.lexsort((np.arange(logits.shape[0]), -logits))
    return order[:k]


def topk_hit(logits, label: int, k: int) -> bool:
    """True iff label sits among the k largest logits under the tie rule."""
    logits = np.asarray(logits)
    num_classes = logits.shape[0]
    if not 1 <= k <= num_classes:
        raise DataError(f"k must lie in [1, {num_classes}], got {k}")
    if not 0 <= label < num_classes:
        raise DataError(f"label {label} out of range [0, {num_classes})")
    return label in topk_indices(logits, k)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int
    true_positives: int
    precision_degenerate: bool = False
    recall_degenerate: bool = False


def prf_per_class(cm: ConfusionMatrix) -> list[ClassMetrics]:
    """Precision/recall/F1 per class; zero-denominator cases yield 0 with a flag."""
    out = []
    counts = cm.counts
    for c in range(cm.num_classes):
        tp = int(counts[c, c])
        support = int(counts[c, :].sum())
        predicted = int(counts[:, c].sum())
        p_degenerate = predicted == 0
        r_degenerate = support == 0
        precision = 0.0 if p_degenerate else tp / predicted
        recall = 0.0 if r_degenerate else tp / support
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        out.append(ClassMetrics(precision, recall, f1, support, predicted, tp,
                                p_degenerate, r_degenerate))
    return out


@dataclass
class Aggregates:
    precision: float
    recall: float
    f1: float


def aggregate(per_class: list[ClassMetrics], supports=None) -> tuple[Aggregates, Aggregates]:
    """(macro, weighted) averages of per-class metrics.

    Weighted recall is summed from integer true-positive counts, so on metrics
    derived from a confusion matrix it equals overall accuracy exactly.
    """
    if supports is None:
        supports = [c.support for c in per_class]
    supports = [int(s) for s in supports]
    if any(s < 0 for s in supports):
        raise DataError(f"supports must be non-negative, got {supports}")
    total = sum(supports)
    if total == 0:
        raise DataError("all class supports are zero")
    n = len(per_class)
    macro = Aggregates(
        precision=math.fsum(c.precision for c in per_class) / n,
        recall=math.fsum(c.recall for c in per_class) / n,
        f1=math.fsum(c.f1 for c in per_class) / n,
    )
    exact_supports = all(s == c.support for s, c in zip(supports, per_class))
    if exact_supports:
        weighted_recall = sum(c.true_positives for c in per_class) / total
    else:
        weighted_recall = math.fsum(s * c.recall for s, c in zip(supports, per_class)) / total
    weighted = Aggregates(
        precision=math.fsum(s * c.precision for s, c in zip(supports, per_class)) / total,
        recall=weighted_recall,
        f1=math.fsum(s * c.f1 for s, c in zip(supports, per_class)) / total,
    )
    return macro, weighted


@dataclass
class MetricsReport:
    top1: float
    top2: float
    per_class: list[ClassMetrics]
    macro: Aggregates
    weighted: Aggregates
    sample_count: int
    degenerate: bool = field(default=False)


def report_from_confusion(cm: ConfusionMatrix, top2_hits: int) -> MetricsReport:
    """Assemble the report; top-1 comes straight off the diagonal."""
    total = cm.total
    if total == 0:
        raise DataError("cannot report on zero samples")
    per_class = prf_per_class(cm)
    macro, weighted = aggregate(per_class)
    return MetricsReport(
        top1=int(cm.counts.diagonal().sum()) / total,
        top2=top2_hits / total,
        per_class=per_class,
        macro=macro,
        weighted=weighted,
        sample_count=total,
        degenerate=any(c.precision_degenerate or c.recall_degenerate for c in per_class),
    )


def evaluate_model(model, samples) -> tuple[MetricsReport, ConfusionMatrix]:
    """One clean forward pass per sample; deterministic given the checkpoint."""
    if not samples:
        raise DataError("evaluation split is empty")
    num_classes = model.config.head.num_classes
    cm = ConfusionMatrix(num_classes)
    top2_hits = 0
    k2 = min(2, num_classes)
    for s in samples:
        logits = model.forward(Tape(record=False), s.pixels).data
        cm.add(s.label, int(topk_indices(logits, 1)[0]))
        top2_hits += topk_hit(logits, s.label, k2)
    return report_from_confusion(cm, top2_hits), cm


def report_to_dict(report: MetricsReport, class_names: list[str]) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "sample_count": report.sample_count,
        "top1": report.top1,
        "top2": report.top2,
        "per_class": {
            name: {
                "precision": c.precision,
                "recall": c.recall,
                "f1": c.f1,
                "support": c.support,
                "degenerate": c.precision_degenerate or c.recall_degenerate,
            }
            for name, c in zip(class_names, report.per_class)
        },
        "macro": {"precision": report.macro.precision, "recall": report.macro.recall,
                  "f1": report.macro.f1},
        "weighted": {"precision": report.weighted.precision, "recall": report.weighted.recall,
                     "f1": report.weighted.f1},
    }


def report_to_json(report: MetricsReport, class_names: list[str]) -> str:
    return json.dumps(report_to_dict(report, class_names), sort_keys=True, indent=2)


def render_table(report: MetricsReport, class_names: list[str]) -> str:
    """Aligned text table of per-class percentages plus the headline accuracies."""
    width = max(len("Class"), *(len(n) for n in class_names))
    lines = [f"{'Class':<{width}}  Precision(%)  Recall(%)  F1-Score(%)  Support"]
    for name, c in zip(class_names, report.per_class):
        lines.append(
            f"{name:<{width}}  {100 * c.precision:>12.2f}  {100 * c.recall:>9.2f}"
            f"  {100 * c.f1:>11.2f}  {c.support:>7d}"
        )
    lines.append("")
    lines.append(f"Top-1 accuracy: {100 * report.top1:.2f}%   Top-2 accuracy: {100 * report.top2:.2f}%")
    lines.append(
        f"Weighted: P {100 * report.weighted.precision:.2f}%  R {100 * report.weighted.recall:.2f}%"
        f"  F1 {100 * report.weighted.f1:.2f}%   (n={report.sample_count})"
    )
    return "\n".join(lines)


def export_embeddings(model, samples, path) -> int:
    """One CSV row per sample: id, true label, then the pooled feature vector.

    Floats are written with full round-trip precision; returns the row count.
    """
    width = model.config.head.bigru_width
    header = ["sample_id", "label"] + [f"e{i:04d}" for i in range(width)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        count = 0
        for i, s in enumerate(samples):
            pooled, _ = model.forward_pooled(Tape(record=False), s.pixels)
            writer.writerow([s.path or str(i), s.label] + [repr(float(v)) for v in pooled.data])
            count += 1
    if count == 0:
        logger.warning("exported header-only embeddings file to %s (empty split)", path)
    return count
