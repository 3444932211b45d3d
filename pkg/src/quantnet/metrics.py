"""Classification metrics: confusion matrix, per-class precision/recall/F1,
macro and support-weighted aggregates, and report rendering.

Aggregates are computed from unrounded per-class values; rounding to two
decimals happens only at render time.  Zero-division convention: an empty
predicted class has precision 0, and F1 is 0 when P + R = 0.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are true labels, columns predicted labels."""

    counts: np.ndarray
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion_matrix(y_true, y_pred, num_classes: int,
                     class_names: list[str] | None = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} true vs {y_pred.shape} predicted")
    if y_true.size and (y_true.min() < 0 or y_true.max() >= num_classes
                        or y_pred.min() < 0 or y_pred.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    names = class_names or [f"class_{i}" for i in range(num_classes)]
    return ConfusionMatrix(counts, list(names))


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    class_names: list[str]
    per_class: list[ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    total: int

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "total": self.total,
            "per_class": {name: {"precision": c.precision, "recall": c.recall,
                                 "f1": c.f1, "support": c.support}
                          for name, c in zip(self.class_names, self.per_class)},
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall,
                      "f1": self.macro_f1},
            "weighted": {"precision": self.weighted_precision, "recall": self.weighted_recall,
                         "f1": self.weighted_f1},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        names = list(obj["per_class"].keys())
        per_class = [ClassMetrics(c["precision"], c["recall"], c["f1"], c["support"])
                     for c in obj["per_class"].values()]
        return cls(names, per_class,
                   obj["macro"]["precision"], obj["macro"]["recall"], obj["macro"]["f1"],
                   obj["weighted"]["precision"], obj["weighted"]["recall"],
                   obj["weighted"]["f1"], obj["accuracy"], obj["total"])


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts.astype(np.float64)
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts)
    col = counts.sum(axis=0)
    row = counts.sum(axis=1)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(diag), where=pr > 0)
    support = row
    weight = support / total
    per_class = [ClassMetrics(float(p), float(r), float(f), int(s))
                 for p, r, f, s in zip(precision, recall, f1, support)]
    return MetricsReport(
        class_names=list(cm.class_names),
        per_class=per_class,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float((precision * weight).sum()),
        weighted_recall=float((recall * weight).sum()),
        weighted_f1=float((f1 * weight).sum()),
        accuracy=float(diag.sum() / total),
        total=total,
    )


def render_report(report: MetricsReport) -> str:
    """Classification report table, two-decimal cells."""
    name_w = max(12, max(len(n) for n in report.class_names) + 2)
    out = io.StringIO()
    out.write(f"{'Class':<{name_w}}{'Precision':>10}{'Recall':>10}{'F1-Score':>10}{'Support':>10}\n")
    for name, c in zip(report.class_names, report.per_class):
        out.write(f"{name:<{name_w}}{c.precision:>10.2f}{c.recall:>10.2f}"
                  f"{c.f1:>10.2f}{c.support:>10d}\n")
    out.write(f"{'Macro Avg':<{name_w}}{report.macro_precision:>10.2f}"
              f"{report.macro_recall:>10.2f}{report.macro_f1:>10.2f}{report.total:>10d}\n")
    out.write(f"{'Weighted Avg':<{name_w}}{report.weighted_precision:>10.2f}"
              f"{report.weighted_recall:>10.2f}{report.weighted_f1:>10.2f}{report.total:>10d}\n")
    out.write(f"{'Accuracy':<{name_w}}{report.accuracy:>10.4f}\n")
    return out.getvalue()


def render_comparison(baseline: MetricsReport, baseline_bytes: int,
                      quantized: MetricsReport, quantized_bytes: int,
                      labels: tuple[str, str] = ("Float32", "Float16")) -> str:
    """Side-by-side comparison: size (MB), accuracy, macro F1, accuracy delta
    (baseline minus quantized), compression ratio."""
    mb = 1e6
    delta = (baseline.accuracy - quantized.accuracy) * 100
    ratio = baseline_bytes / quantized_bytes
    delta_str = f"{delta:.2f}%".replace("-", "−")
    rows = [
        ("Model Size (MB)", f"{baseline_bytes / mb:.2f}", f"{quantized_bytes / mb:.2f}"),
        ("Validation Accuracy", f"{baseline.accuracy * 100:.2f}%", f"{quantized.accuracy * 100:.2f}%"),
        ("Macro F1-Score", f"{baseline.macro_f1:.2f}", f"{quantized.macro_f1:.2f}"),
        ("Accuracy Delta", "---", delta_str),
        ("Compression Ratio", "1.00×", f"{ratio:.2f}×"),
    ]
    out = io.StringIO()
    out.write(f"{'Metric':<22}{labels[0]:>12}{labels[1]:>12}\n")
    for name, a, b in rows:
        out.write(f"{name:<22}{a:>12}{b:>12}\n")
    return out.getvalue()


def confusion_to_csv(cm: ConfusionMatrix) -> str:
    """CSV export with class-name header row and column."""
    lines = ["," + ",".join(cm.class_names)]
    for name, row in zip(cm.class_names, cm.counts):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"
