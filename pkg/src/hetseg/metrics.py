"""Dice overlap, Table-style summaries and the Wilcoxon signed-rank test."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import InsufficientData, NotFound, ShapeError, ValidationError

EXACT_MAX_N = 20


def _data(m):
    return np.asarray(getattr(m, "data", m))


def dice_coefficient(pred, truth, class_id: int, n_classes: int | None = None) -> float:
    """``2|A & B| / (|A| + |B|)`` for one class; 1.0 when both are empty."""
    p, t = _data(pred), _data(truth)
    if p.shape != t.shape:
        raise ShapeError(f"pred shape {p.shape} != truth shape {t.shape}")
    if class_id < 0 or (n_classes is not None and class_id >= n_classes):
        raise NotFound(f"unknown class id {class_id}")
    a = p == class_id
    b = t == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def dice_per_class(pred, truth, class_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Dice for several classes from one confusion matrix.

    Returns ``(values, both_empty)``.
    """
    p, t = _data(pred), _data(truth)
    if p.shape != t.shape:
        raise ShapeError(f"pred shape {p.shape} != truth shape {t.shape}")
    n = int(max(p.max(initial=0), t.max(initial=0), max(class_ids, default=0))) + 1
    cm = kernels.confusion_counts(
        np.ascontiguousarray(p, dtype=np.int64), np.ascontiguousarray(t, dtype=np.int64), n
    )
    values = np.empty(len(class_ids))
    empty = np.zeros(len(class_ids), dtype=bool)
    for k, c in enumerate(class_ids):
        inter = cm[c, c]
        total = cm[c, :].sum() + cm[:, c].sum()
        if total == 0:
            values[k], empty[k] = 1.0, True
        else:
            values[k] = 2.0 * inter / total
    return values, empty


@dataclass
class DiceScores:
    values: np.ndarray  # (subjects, classes)
    class_names: list[str]
    subject_ids: list[str]
    both_empty: np.ndarray = None  # (subjects, classes) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.subject_ids), len(self.class_names)):
            raise ShapeError(
                f"values {self.values.shape} vs {len(self.subject_ids)} subjects x {len(self.class_names)} classes"
            )
        if self.both_empty is None:
            self.both_empty = np.zeros(self.values.shape, dtype=bool)
        if ((self.values < 0) | (self.values > 1)).any():
            raise ValidationError("Dice values must lie in [0, 1]")

    def subject_means(self) -> np.ndarray:
        return self.values.mean(axis=1)


def dice_scores(preds, truths, class_ids, class_names, subject_ids) -> DiceScores:
    rows, flags = [], []
    for p, t in zip(preds, truths, strict=True):
        v, e = dice_per_class(p, t, class_ids)
        rows.append(v)
        flags.append(e)
    return DiceScores(np.array(rows).reshape(len(rows), len(class_ids)), list(class_names), list(subject_ids), np.array(flags).reshape(len(rows), len(class_ids)))


@dataclass
class ClassSummary:
    mean: float
    std: float
    n: int
    single_subject: bool = False


def summarize(scores: DiceScores, exclude_both_empty: bool = False) -> dict[str, ClassSummary]:
    """Mean and sample standard deviation (n - 1) per class."""
    if scores.values.size == 0:
        raise ValidationError("no scores to summarise")
    out = {}
    for k, name in enumerate(scores.class_names):
        col = scores.values[:, k]
        if exclude_both_empty:
            col = col[~scores.both_empty[:, k]]
        if col.size == 0:
            out[name] = ClassSummary(float("nan"), float("nan"), 0)
        elif col.size == 1:
            out[name] = ClassSummary(float(col[0]), 0.0, 1, single_subject=True)
        elif np.all(col == col[0]):
            out[name] = ClassSummary(float(col[0]), 0.0, int(col.size))
        else:
            out[name] = ClassSummary(float(col.mean()), float(col.std(ddof=1)), int(col.size))
    return out


def render_table(summaries: dict[str, dict[str, ClassSummary]], class_names: Sequence[str], digits: int = 3) -> str:
    """Plain-text table: one row per system, a Mean | Std pair per class."""
    width = max(10, digits + 4)
    name_w = max([len("System")] + [len(s) for s in summaries]) + 2
    head1 = " " * name_w + "".join(f"|{c:^{2 * width + 1}}" for c in class_names) + "|"
    head2 = f"{'System':<{name_w}}" + "".join(f"|{'Mean':^{width}}|{'Std':^{width}}"[0:] for _ in class_names) + "|"
    rule = "-" * len(head1)
    lines = [rule, head1, head2, rule]
    for system, summary in summaries.items():
        cells = "".join(
            f"|{summary[c].mean:^{width}.{digits}f}|{summary[c].std:^{width}.{digits}f}" for c in class_names
        )
        lines.append(f"{system:<{name_w}}{cells}|")
    lines.append(rule)
    return "\n".join(lines) + "\n"


def scores_csv(scores_by_system: dict[str, DiceScores]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "subject", "class", "dice", "both_empty"])
    for system, sc in scores_by_system.items():
        for i, subj in enumerate(sc.subject_ids):
            for k, cls in enumerate(sc.class_names):
                w.writerow([system, subj, cls, f"{sc.values[i, k]:.6f}", int(sc.both_empty[i, k])])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Wilcoxon signed-rank
# --------------------------------------------------------------------------


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str = "exact"


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2))


def wilcoxon_signed_rank(a, b, exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Two-sided paired signed-rank test.

    Zero differences are dropped; ties get midranks. The statistic is the
    smaller of the positive and negative rank sums. For up to
    ``exact_max_n`` non-zero differences the p-value is exact (the null
    distribution counts all 2^n sign assignments of the observed ranks);
    above that a normal approximation with tie and continuity corrections
    is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("wilcoxon needs two 1-D samples of equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n < 5:
        raise InsufficientData(f"only {n} non-zero differences; at least 5 are required")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = kernels.signed_rank_counts(doubled)
        cutoff = int(round(2 * w))
        tail = counts[: cutoff + 1].sum() / counts.sum()
        return WilcoxonResult(w, float(min(1.0, 2 * tail)), n, "exact")

    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - (tie_counts**3 - tie_counts).sum() / 48
    diff = w - mean
    corrected = diff - 0.5 * np.sign(diff)
    z = corrected / math.sqrt(var) if var > 0 else 0.0
    return WilcoxonResult(w, float(min(1.0, 2 * _normal_sf(abs(z)))), n, "normal")
