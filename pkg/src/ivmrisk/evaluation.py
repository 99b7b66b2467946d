"""Classification metrics: confusion counts, ROC curves, AUC and operating points.

Throughout, an observation is predicted positive (crash) iff its score is
``>= threshold``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, fmt

DEFAULT_FPR_TARGETS = (0.101, 0.200, 0.301)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def sensitivity(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else float("nan")

    @property
    def specificity(self) -> float:
        neg = self.fp + self.tn
        return self.tn / neg if neg else float("nan")

    @property
    def false_alarm_rate(self) -> float:
        """1 - specificity."""
        neg = self.fp + self.tn
        return self.fp / neg if neg else float("nan")

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / (self.tp + self.fp + self.fn + self.tn)


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(int)


def confusion_at(scores, labels, threshold: float) -> ConfusionCounts:
    s, y = _scores_labels(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    return ConfusionCounts(tp=tp, fp=fp, fn=int(np.sum(y == 1)) - tp, tn=int(np.sum(y == 0)) - fp)


@dataclass(frozen=True)
class RocCurve:
    """ROC vertices from threshold +inf (point (0, 0)) down to the lowest score (1, 1).

    ``tp``/``fp`` hold the confusion counts at each vertex so operating
    points can report accuracy without the raw scores.
    """

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def tpr(self) -> np.ndarray:
        return self.tp / self.n_pos

    @property
    def fpr(self) -> np.ndarray:
        return self.fp / self.n_neg

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    @property
    def auc(self) -> float:
        # exact in integers: 2 * P * N * AUC = sum dFP * (TP_prev + TP_cur)
        dfp = np.diff(self.fp)
        twice = int(np.sum(dfp * (self.tp[1:] + self.tp[:-1])))
        return twice / (2 * self.n_pos * self.n_neg)

    def __len__(self):
        return self.thresholds.size


def roc_curve(scores, labels) -> RocCurve:
    s, y = _scores_labels(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        missing = "positive (label 1)" if n_pos == 0 else "negative (label 0)"
        raise ValueError(f"ROC needs both classes; no {missing} observations")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp_cum = np.cumsum(y_sorted == 1)
    fp_cum = np.cumsum(y_sorted == 0)
    # one vertex per distinct score: the last position of each tie group
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s.size - 1]
    thresholds = np.r_[np.inf, s_sorted[last]]
    tp = np.r_[0, tp_cum[last]].astype(np.int64)
    fp = np.r_[0, fp_cum[last]].astype(np.int64)
    return RocCurve(thresholds=thresholds, tp=tp, fp=fp, n_pos=n_pos, n_neg=n_neg)


def auc(scores, labels) -> float:
    return roc_curve(scores, labels).auc


@dataclass(frozen=True)
class OperatingPoint:
    target: float
    threshold: float
    false_alarm_rate: float
    sensitivity: float
    accuracy: float


def operating_points(curve: RocCurve, fpr_targets=DEFAULT_FPR_TARGETS):
    """For each target, the vertex with the largest 1-specificity not above it."""
    fpr = curve.fpr
    out = []
    for target in fpr_targets:
        if not 0.0 <= target <= 1.0:
            raise ValueError(f"fpr target {target} outside [0, 1]")
        # fpr is non-decreasing along the curve; take the last vertex <= target
        k = int(np.searchsorted(fpr, target, side="right")) - 1
        tp, fp = int(curve.tp[k]), int(curve.fp[k])
        acc = (tp + curve.n_neg - fp) / (curve.n_pos + curve.n_neg)
        out.append(OperatingPoint(target=float(target), threshold=float(curve.thresholds[k]),
                                  false_alarm_rate=float(fpr[k]),
                                  sensitivity=float(curve.tpr[k]), accuracy=acc))
    return out


def apply_threshold(scores, labels, target, threshold) -> OperatingPoint:
    """Operating point on new data for a threshold chosen elsewhere."""
    c = confusion_at(scores, labels, threshold)
    return OperatingPoint(target=float(target), threshold=float(threshold),
                          false_alarm_rate=c.false_alarm_rate, sensitivity=c.sensitivity,
                          accuracy=c.accuracy)


def roc_csv(curves: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "threshold", "fpr", "tpr"])
    for name, curve in curves.items():
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([name, fmt(t), fmt(f), fmt(p)])
    return buf.getvalue()


def roc_svg(curves: dict, title="ROC curves") -> str:
    """Vector rendering with the chance diagonal and an AUC legend."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "ivmrisk-roc", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.plot([0, 1], [0, 1], linestyle="--", color="0.6", linewidth=1)
        for name, curve in curves.items():
            ax.plot(curve.fpr, curve.tpr, linewidth=1.5, label=f"{name} (AUC = {curve.auc:.3f})")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("1 - Specificity")
        ax.set_ylabel("Sensitivity")
        ax.set_title(title)
        ax.legend(loc="lower right")
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return buf.getvalue()


def emit_roc_plot(curves: dict, path):
    """Write ``<path>.csv`` (curve vertices) and ``<path>.svg``; returns both paths."""
    if not curves:
        raise ValueError("need at least one ROC curve")
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".csv", ".svg") else path
    csv_path = atomic_write_text(base.with_suffix(".csv"), roc_csv(curves))
    svg_path = atomic_write_text(base.with_suffix(".svg"), roc_svg(curves))
    return csv_path, svg_path


REPORT_COLUMNS = ("model", "train_auc", "test_auc", "threshold_source", "fpr_target",
                  "threshold", "false_alarm_rate", "sensitivity", "accuracy")


def performance_rows(name, train_scores, train_labels, test_scores, test_labels,
                     fpr_targets=DEFAULT_FPR_TARGETS):
    """Rows of the predictive-performance table for one model.

    Thresholds are picked on the test ROC (``test``) and, separately, on the
    training ROC and then applied to the test data (``train``).
    """
    train_curve = roc_curve(train_scores, train_labels)
    test_curve = roc_curve(test_scores, test_labels)
    rows = []
    for op in operating_points(test_curve, fpr_targets):
        rows.append(_row(name, train_curve.auc, test_curve.auc, "test", op))
    for op_tr in operating_points(train_curve, fpr_targets):
        op = apply_threshold(test_scores, test_labels, op_tr.target, op_tr.threshold)
        rows.append(_row(name, train_curve.auc, test_curve.auc, "train", op))
    return rows, train_curve, test_curve


def _row(name, train_auc, test_auc, source, op):
    return {"model": name, "train_auc": train_auc, "test_auc": test_auc,
            "threshold_source": source, "fpr_target": op.target, "threshold": op.threshold,
            "false_alarm_rate": op.false_alarm_rate, "sensitivity": op.sensitivity,
            "accuracy": op.accuracy}


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r["model"], *(fmt(r[c]) if c != "threshold_source" else r[c]
                                  for c in REPORT_COLUMNS[1:])])
    return buf.getvalue()
