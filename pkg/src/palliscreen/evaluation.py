"""Ranking and calibration metrics: PR/AP, recall at fixed precision,
ROC/AUROC, Brier score and reliability curves.

Examples sharing a score enter the confusion counts together, so every
metric here is invariant to the order of tied examples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ScoredExample:
    score: float
    label: int
    admitted: bool = False


@dataclass(frozen=True)
class CurvePoints:
    kind: str  # pr | roc | reliability
    x: np.ndarray
    y: np.ndarray

    def rows(self):
        return list(zip(self.x.tolist(), self.y.tolist()))


def _check(y, s):
    y = np.asarray(y, dtype=np.float64).ravel()
    s = np.asarray(s, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError("labels and scores differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y, s


def _sweep(y, s):
    """Cumulative (tp, fp) at each distinct score threshold, highest first."""
    y, s = _check(y, s)
    pos = y.sum()
    if pos == 0 or pos == y.size:
        raise ValueError("need both positive and negative examples")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s_sorted))[0], y.size - 1]
    tp = np.cumsum(y_sorted)[last_of_group]
    fp = (last_of_group + 1) - tp
    return tp, fp, pos, y.size - pos


def pr_curve_and_ap(y, s) -> tuple[CurvePoints, float]:
    """Interpolated precision-recall curve and (non-interpolated) average precision.

    ``AP = sum_n (R_n - R_{n-1}) * P_n`` over distinct thresholds.
    The curve starts at recall 0 and reports ``max_{r' >= r} P(r')``.
    """
    tp, fp, n_pos, _ = _sweep(y, s)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    x = np.r_[0.0, recall]
    yy = np.r_[interp[0], interp]
    return CurvePoints("pr", x, yy), ap


def average_precision(y, s) -> float:
    return pr_curve_and_ap(y, s)[1]


def interpolated_average_precision(curve: CurvePoints) -> float:
    """Area under the interpolated PR step curve."""
    return float(np.sum(np.diff(curve.x) * curve.y[1:]))


def recall_at_precision(curve: CurvePoints, target: float = 0.9) -> float:
    """Largest recall whose interpolated precision reaches ``target`` (0 if none)."""
    ok = curve.y >= target
    return float(curve.x[ok].max()) if ok.any() else 0.0


def roc_and_auroc(y, s) -> tuple[CurvePoints, float]:
    """ROC points from (0, 0) to (1, 1) and the trapezoidal area beneath them."""
    tp, fp, n_pos, n_neg = _sweep(y, s)
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return CurvePoints("roc", fpr, tpr), auc


def auroc(y, s) -> float:
    return roc_and_auroc(y, s)[1]


def brier(y, s) -> float:
    y, s = _check(y, s)
    if y.size == 0:
        raise ValueError("empty input")
    return float(np.mean((s - y) ** 2))


def reliability_curve(y, s, n_bins: int = 10) -> CurvePoints:
    """Equal-width bins on [0, 1]; one (mean score, positive rate) per non-empty bin.

    A score of exactly 1.0 falls in the top bin.
    """
    y, s = _check(y, s)
    if y.size == 0:
        raise ValueError("empty input")
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    b = np.clip(np.floor(s * n_bins).astype(np.int64), 0, n_bins - 1)
    count = np.bincount(b, minlength=n_bins)
    sum_s = np.bincount(b, weights=s, minlength=n_bins)
    sum_y = np.bincount(b, weights=y, minlength=n_bins)
    keep = count > 0
    return CurvePoints("reliability", sum_s[keep] / count[keep], sum_y[keep] / count[keep])


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------

METRICS = ("n", "prevalence", "ap", "ap_interpolated", "auroc", "brier", "recall_at_precision")


@dataclass
class GroupReport:
    metrics: dict[str, float | None]
    curves: dict[str, CurvePoints] = field(default_factory=dict)

    @property
    def available(self) -> bool:
        return self.metrics.get("ap") is not None


@dataclass
class EvaluationReport:
    groups: dict[str, GroupReport]
    precision_target: float = 0.9
    n_bins: int = 10

    def format(self) -> str:
        lines = [f"# precision_target\t{self.precision_target:g}", f"# n_bins\t{self.n_bins}"]
        for g, rep in self.groups.items():
            for k in METRICS:
                v = rep.metrics.get(k)
                if v is None:
                    val = "unavailable"
                elif k == "n":
                    val = str(int(v))
                else:
                    val = f"{v:.6f}"
                lines.append(f"{g}.{k}\t{val}")
        return "\n".join(lines) + "\n"


def _evaluate_group(y, s, precision_target, n_bins) -> GroupReport:
    m: dict[str, float | None] = {k: None for k in METRICS}
    m["n"] = float(y.size)
    if y.size == 0:
        return GroupReport(m)
    m["prevalence"] = float(y.mean())
    m["brier"] = brier(y, s)
    curves = {"reliability": reliability_curve(y, s, n_bins)}
    if 0 < y.sum() < y.size:
        pr, ap = pr_curve_and_ap(y, s)
        roc, auc = roc_and_auroc(y, s)
        m["ap"] = ap
        m["ap_interpolated"] = interpolated_average_precision(pr)
        m["auroc"] = auc
        m["recall_at_precision"] = recall_at_precision(pr, precision_target)
        curves.update(pr=pr, roc=roc)
    return GroupReport(m, curves)


def evaluate_all(examples: Sequence[ScoredExample], precision_target: float = 0.9,
                 n_bins: int = 10) -> EvaluationReport:
    """All metrics on the full set and on the admitted subset.

    A subset lacking one of the classes keeps n/prevalence/Brier and marks
    the ranking metrics unavailable.
    """
    if not examples:
        raise ValueError("no examples to evaluate")
    y = np.array([e.label for e in examples], dtype=np.float64)
    s = np.array([e.score for e in examples], dtype=np.float64)
    adm = np.array([e.admitted for e in examples], dtype=bool)
    if not 0 < y.sum() < y.size:
        raise ValueError("evaluation needs both classes")
    groups = {"overall": _evaluate_group(y, s, precision_target, n_bins),
              "admitted": _evaluate_group(y[adm], s[adm], precision_target, n_bins)}
    return EvaluationReport(groups, precision_target, n_bins)


def write_curve(curve: CurvePoints, path) -> None:
    heads = {"pr": ("recall", "precision"), "roc": ("fpr", "tpr"),
             "reliability": ("mean_predicted", "fraction_positive")}
    a, b = heads[curve.kind]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{a}\t{b}\n")
        for x, y in curve.rows():
            fh.write(f"{x:.10f}\t{y:.10f}\n")


def expected_brier(p) -> float:
    """``E[p(1-p)]``: the Brier score of perfectly calibrated scores."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.mean(p * (1 - p))) if p.size else math.nan
