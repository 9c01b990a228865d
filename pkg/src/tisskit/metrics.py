"""Confusion-matrix accumulation and grouped mIoU reporting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import MetricError
from .protocol import IGNORE_ID, TaskSequence


@dataclass
class ConfusionMatrix:
    """Square integer confusion matrix, rows true class, columns predicted."""

    n_classes: int
    counts: np.ndarray | None = None

    def __post_init__(self):
        if self.n_classes < 1:
            raise MetricError("confusion matrix needs at least one class")
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.n_classes, self.n_classes):
                raise MetricError(
                    f"counts shape {self.counts.shape} does not match {self.n_classes} classes"
                )

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, target: np.ndarray) -> ConfusionMatrix:
    """Fold one prediction/target pair into the matrix, skipping ignore pixels.

    Order of accumulation never matters: the matrix is a sum of per-pixel
    one-hot outer products.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise MetricError(f"pred shape {pred.shape} != target shape {target.shape}")
    keep = target != IGNORE_ID
    pred = pred[keep].astype(np.int64)
    target = target[keep].astype(np.int64)
    n = cm.n_classes
    if pred.size:
        if pred.min() < 0 or pred.max() >= n:
            raise MetricError(f"predictions outside 0..{n - 1}")
        if target.min() < 0 or target.max() >= n:
            raise MetricError(f"targets outside 0..{n - 1} after ignore filtering")
        flat = n * target + pred
        cm.counts += np.bincount(flat, minlength=n * n).reshape(n, n)
    return cm


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; classes whose union is empty come back as NaN."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return iou


def miou(cm: ConfusionMatrix, class_group) -> float:
    """Mean IoU over a class group, excluding classes that never occur.

    A class occurs when its union (true or predicted pixels) is non-empty.
    Raises when the group has no occurring class at all, a silent 0 or NaN
    there would poison downstream comparisons.
    """
    group = sorted(set(int(c) for c in class_group))
    if not group:
        raise MetricError("empty class group")
    if group[0] < 0 or group[-1] >= cm.n_classes:
        raise MetricError(f"class group {group} outside 0..{cm.n_classes - 1}")
    ious = per_class_iou(cm)[group]
    valid = ~np.isnan(ious)
    if not valid.any():
        raise MetricError(f"no class in group {group} occurs in the matrix")
    return float(ious[valid].mean())


@dataclass(frozen=True)
class MetricReport:
    """Per-class rows plus named group means, with fixed CSV rendering.

    per_class rows are (step, class_id, class_name, iou or None); group rows
    are (name, miou) in insertion order. The CSV layout is part of the
    package contract: a header line, one row per class, then one
    "group:<name>" row per group with the value in the iou column.
    """

    per_class: tuple
    groups: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "class_id", "class_name", "iou"])
        for step, class_id, name, iou in self.per_class:
            writer.writerow([step, class_id, name, "" if iou is None else f"{iou:.6f}"])
        for name, value in self.groups:
            writer.writerow([f"group:{name}", "", "", f"{value:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'step':>4}  {'id':>3}  {'class':<16} {'iou':>8}"]
        for step, class_id, name, iou in self.per_class:
            shown = "-" if iou is None else f"{iou:.4f}"
            lines.append(f"{step:>4}  {class_id:>3}  {name:<16} {shown:>8}")
        lines.append("")
        for name, value in self.groups:
            lines.append(f"{name:<26} {value:.4f}")
        return "\n".join(lines) + "\n"

    def group(self, name: str) -> float:
        for key, value in self.groups:
            if key == name:
                return value
        raise MetricError(f"no group named {name!r}")


def report(cms: dict[int, ConfusionMatrix], seq: TaskSequence) -> MetricReport:
    """Grouped report over per-step confusion matrices.

    Per-class rows show, for every step, the IoU of each class seen by that
    step under that step's matrix. Summary groups are read off the final
    step's matrix: "old" (background plus the first step's classes), "new"
    (everything added later), "all", "background" alone, and one
    "step<t>_classes" group per step.
    """
    if not cms:
        raise MetricError("no confusion matrices to report")
    steps = sorted(cms)
    expected_rows = {t: seq.n_classes_at(t) for t in steps}
    for t in steps:
        if cms[t].n_classes != expected_rows[t]:
            raise MetricError(
                f"step {t} matrix has {cms[t].n_classes} classes, schedule says {expected_rows[t]}"
            )

    space = seq.label_space
    per_class = []
    for t in steps:
        ious = per_class_iou(cms[t])
        for c in seq.seen_classes(t):
            value = ious[c]
            per_class.append((t, c, space.name_of(c), None if np.isnan(value) else float(value)))

    final = steps[-1]
    cm = cms[final]
    old = list(seq.old_classes(1)) if seq.n_steps > 1 else list(seq.seen_classes(0))
    new = [c for c in seq.seen_classes(final) if c not in old]
    groups = [("old", miou(cm, old))]
    if new:
        groups.append(("new", miou(cm, new)))
    groups.append(("all", miou(cm, seq.seen_classes(final))))
    groups.append(("background", miou(cm, [0])))
    for t in range(seq.n_steps):
        if t <= final:
            groups.append((f"step{t}_classes", miou(cm, seq.new_classes(t))))
    return MetricReport(per_class=tuple(per_class), groups=tuple(groups))
