"""ROC / precision-recall evaluation of scored binary predictions."""
import csv
import io
import json
from dataclasses import dataclass

import numpy as np


@dataclass
class ScoredLabelSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-D and equally long")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 or 1")


@dataclass
class EvalCurve:
    """Curve samples ordered by decreasing threshold.

    The first point (threshold ``inf``) is the empty prediction; every later
    point corresponds to predicting positive iff ``score >= threshold`` at a
    distinct observed score.
    """
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    auc: float
    ap: float
    n_pos: int
    n_neg: int


def _sweep(data):
    pos = int(data.labels.sum())
    neg = len(data.labels) - pos
    if pos == 0 or neg == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(-data.scores, kind="stable")
    s = data.scores[order]
    y = data.labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.r_[0, tp[last]].astype(np.float64)
    fp = np.r_[0, fp[last]].astype(np.float64)
    thresholds = np.r_[np.inf, s[last]]
    tpr = tp / pos
    fpr = fp / neg
    predicted = tp + fp
    precision = np.divide(tp, predicted, out=np.ones_like(tp), where=predicted > 0)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    ap = float(np.sum(np.diff(tpr) * precision[1:]))
    return EvalCurve(thresholds, tpr, fpr, precision, tpr.copy(), auc, ap, pos, neg)


def roc(data):
    """ROC curve with trapezoidal AUC; tied scores across classes earn half credit."""
    return _sweep(data)


def precision_recall(data):
    """Precision-recall curve with AP = sum over thresholds of (R_n - R_{n-1}) * P_n."""
    return _sweep(data)


@dataclass
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float


def _ratio(a, b):
    return a / b if b else 0.0


def confusion_at(data, threshold):
    """Counts and rates when predicting positive iff score >= threshold; 0/0 is taken as 0."""
    pred = data.scores >= threshold
    y = data.labels == 1
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return Confusion(tp, fp, tn, fn, _ratio(tp + tn, len(y)), precision, recall,
                     _ratio(2 * precision * recall, precision + recall))


def _fmt(v):
    return format(float(v), ".6g")


CSV_COLUMNS = ("threshold", "fpr", "tpr", "precision", "recall")


def curve_csv(curve):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in zip(curve.thresholds, curve.fpr, curve.tpr, curve.precision, curve.recall):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def curve_summary(curve):
    return {"auc": float(_fmt(curve.auc)), "ap": float(_fmt(curve.ap)),
            "n_pos": curve.n_pos, "n_neg": curve.n_neg, "points": len(curve.thresholds)}


def export_curves(curve, prefix):
    """Write ``<prefix>.csv`` and ``<prefix>.json``; returns both paths."""
    csv_path, json_path = f"{prefix}.csv", f"{prefix}.json"
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        f.write(curve_csv(curve))
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(curve_summary(curve), f, sort_keys=True, indent=2)
        f.write("\n")
    return csv_path, json_path


def read_curve_csv(path):
    """Parse an exported CSV back into a dict of float arrays keyed by column."""
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    return {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}
