"""Discrimination and calibration metrics.

Scores are predicted probabilities, labels are 0/1. A patient is called
positive at threshold ``theta`` when score >= theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class SingleClass(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: float
    fp: float
    tn: float
    fn: float

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def sensitivity(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self):
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def ppv(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def npv(self):
        return _ratio(self.tn, self.tn + self.fn)

    def scaled(self, k: float) -> "ConfusionCounts":
        return ConfusionCounts(self.tp * k, self.fp * k, self.tn * k, self.fn * k)

    @classmethod
    def expected(cls, sensitivity, specificity, n_pos, n_neg):
        return cls(sensitivity * n_pos, (1 - specificity) * n_neg,
                   specificity * n_neg, (1 - sensitivity) * n_pos)


def _ratio(a, b):
    return a / b if b > 0 else math.nan


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; ties between a case and a control count one half."""
    s, y = _as_arrays(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("AUROC needs both cases and controls")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def dor(c: ConfusionCounts) -> float:
    """Diagnostic odds ratio (TP*TN)/(FP*FN); +inf when FP*FN == 0."""
    den = c.fp * c.fn
    num = c.tp * c.tn
    if den == 0:
        return math.inf if num > 0 else math.nan
    return num / den


def confusion_at(scores, labels, theta: float) -> ConfusionCounts:
    s, y = _as_arrays(scores, labels)
    pos = s >= theta
    tp = float(np.sum(pos & (y == 1)))
    fp = float(np.sum(pos & (y == 0)))
    return ConfusionCounts(tp, fp, float(np.sum(~pos & (y == 0))), float(np.sum(~pos & (y == 1))))


def roc_points(scores, labels):
    """Operating points at every distinct score, thresholds descending.

    Returns (thresholds, tp, fp, n_pos, n_neg) where row i counts scores >= thresholds[i].
    """
    s, y = _as_arrays(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("ROC needs both cases and controls")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s_sorted) - 1]
    return s_sorted[last], tp[last].astype(float), fp[last].astype(float), n1, n0


# ------------------------------------------------------------- thresholds


@dataclass(frozen=True)
class Criterion:
    kind: str  # sens_target | spec_target | sens_eq_spec | max_youden | prior_prevalence | fixed
    value: float | None = None

    @property
    def label(self) -> str:
        v = self.value
        if self.kind == "sens_target":
            return f"Sensitivity = {v:g}"
        if self.kind == "spec_target":
            return f"Specificity = {v:g}"
        if self.kind == "sens_eq_spec":
            return "Sensitivity = Specificity"
        if self.kind == "max_youden":
            return "Max Youden's J"
        if self.kind == "prior_prevalence":
            return f"Threshold = {v:g} (prior prevalence)"
        return f"Threshold = {v:g}"


def SensTarget(v=0.8):
    return Criterion("sens_target", v)


def SpecTarget(v=0.8):
    return Criterion("spec_target", v)


def SensEqSpec():
    return Criterion("sens_eq_spec")


def MaxYouden():
    return Criterion("max_youden")


def PriorPrevalence(pi):
    return Criterion("prior_prevalence", pi)


def Fixed(theta=0.5):
    return Criterion("fixed", theta)


DEFAULT_CRITERIA = (SensTarget(0.8), SpecTarget(0.8), SensEqSpec(), MaxYouden(), Fixed(0.5))


@dataclass(frozen=True)
class ThresholdReport:
    criterion: Criterion
    threshold: float
    sensitivity: float
    specificity: float
    ppv: float
    npv: float
    youden_j: float
    dor: float
    counts: ConfusionCounts

    @classmethod
    def from_counts(cls, criterion, threshold, c: ConfusionCounts):
        sens, spec = c.sensitivity, c.specificity
        return cls(criterion, float(threshold), sens, spec, c.ppv, c.npv,
                   sens + spec - 1.0, dor(c), c)


def _interp(th, tp, fp, n1, n0, i, j, w):
    """Counts a fraction ``w`` of the way from ROC point i to point j."""
    t = (1 - w) * th[i] + w * th[j]
    tpv = (1 - w) * tp[i] + w * tp[j]
    fpv = (1 - w) * fp[i] + w * fp[j]
    return t, ConfusionCounts(tpv, fpv, n0 - fpv, n1 - tpv)


def _point(th, tp, fp, n1, n0, i):
    return th[i], ConfusionCounts(tp[i], fp[i], n0 - fp[i], n1 - tp[i])


def _solve(th, tp, fp, n1, n0, crit: Criterion):
    sens = tp / n1
    spec = 1.0 - fp / n0
    if crit.kind == "sens_target":
        # highest threshold whose sensitivity reaches the target; interpolate back
        # toward the previous point only if that buys specificity
        i = int(np.flatnonzero(sens >= crit.value - 1e-15)[0])
        if sens[i] > crit.value and i > 0 and spec[i - 1] > spec[i]:
            w = (sens[i] - crit.value) / (sens[i] - sens[i - 1])
            return _interp(th, tp, fp, n1, n0, i, i - 1, w)
        return _point(th, tp, fp, n1, n0, i)
    if crit.kind == "spec_target":
        # lowest threshold whose specificity still reaches the target
        ok = np.flatnonzero(spec >= crit.value - 1e-15)
        if ok.size == 0:
            return _point(th, tp, fp, n1, n0, 0)
        i = int(ok[-1])
        if spec[i] > crit.value and i + 1 < len(th) and sens[i + 1] > sens[i]:
            w = (spec[i] - crit.value) / (spec[i] - spec[i + 1])
            return _interp(th, tp, fp, n1, n0, i, i + 1, w)
        return _point(th, tp, fp, n1, n0, i)
    if crit.kind == "sens_eq_spec":
        diff = sens - spec
        i = int(np.argmin(np.abs(diff)))
        if diff[i] != 0:
            # sens rises and spec falls as the threshold drops; find the crossing segment
            cross = np.flatnonzero((diff[:-1] < 0) & (diff[1:] > 0))
            if cross.size:
                k = int(cross[0])
                w = -diff[k] / (diff[k + 1] - diff[k])
                return _interp(th, tp, fp, n1, n0, k, k + 1, w)
        return _point(th, tp, fp, n1, n0, i)
    if crit.kind == "max_youden":
        i = int(np.argmax(sens + spec - 1.0))
        return _point(th, tp, fp, n1, n0, i)
    raise ValueError(f"criterion {crit.kind} is not ROC-searched")


def threshold_table(scores, labels, criteria=DEFAULT_CRITERIA, prior_prevalence: float | None = None):
    """One ThresholdReport per criterion (plus the prior-prevalence threshold if given)."""
    s, y = _as_arrays(scores, labels)
    th, tp, fp, n1, n0 = roc_points(s, y)
    criteria = list(criteria)
    if prior_prevalence is not None and not any(c.kind == "prior_prevalence" for c in criteria):
        criteria.insert(len(criteria) - 1 if criteria and criteria[-1].kind == "fixed" else len(criteria),
                        PriorPrevalence(prior_prevalence))
    out = []
    for crit in criteria:
        if crit.kind in ("fixed", "prior_prevalence"):
            theta = crit.value
            out.append(ThresholdReport.from_counts(crit, theta, confusion_at(s, y, theta)))
        else:
            theta, counts = _solve(th, tp, fp, n1, n0, crit)
            out.append(ThresholdReport.from_counts(crit, theta, counts))
    return out


# ------------------------------------------------------------ calibration


def brier(scores, labels) -> float:
    s, y = _as_arrays(scores, labels)
    return float(np.mean((s - y) ** 2))


def _bins(s, n_bins):
    return np.clip(np.floor(s * n_bins).astype(int), 0, n_bins - 1)


@dataclass
class CalibrationCurve:
    bin_index: np.ndarray
    mean_pred: np.ndarray
    mean_obs: np.ndarray
    count: np.ndarray


def calibration_curve(scores, labels, n_bins: int = 10) -> CalibrationCurve:
    """Equal-width probability bins; empty bins are dropped."""
    s, y = _as_arrays(scores, labels)
    b = _bins(s, n_bins)
    count = np.bincount(b, minlength=n_bins).astype(float)
    sum_p = np.bincount(b, weights=s, minlength=n_bins)
    sum_y = np.bincount(b, weights=y, minlength=n_bins)
    keep = count > 0
    return CalibrationCurve(np.flatnonzero(keep), sum_p[keep] / count[keep],
                            sum_y[keep] / count[keep], count[keep])


def ece(scores, labels, n_bins: int = 10) -> float:
    curve = calibration_curve(scores, labels, n_bins)
    n = curve.count.sum()
    return float(np.sum(curve.count / n * np.abs(curve.mean_pred - curve.mean_obs)))


def calibration_fit(scores, labels, n_bins: int = 10):
    """Count-weighted least-squares line through binned (predicted, observed) pairs.

    Returns (slope, intercept, curve); slope and intercept are nan with fewer
    than two distinct non-empty bins.
    """
    curve = calibration_curve(scores, labels, n_bins)
    x, yv, w = curve.mean_pred, curve.mean_obs, curve.count
    if len(x) < 2:
        return math.nan, math.nan, curve
    xm = np.sum(w * x) / w.sum()
    ym = np.sum(w * yv) / w.sum()
    sxx = np.sum(w * (x - xm) ** 2)
    if sxx == 0:
        return math.nan, math.nan, curve
    slope = float(np.sum(w * (x - xm) * (yv - ym)) / sxx)
    return slope, float(ym - slope * xm), curve


def summarize(scores, labels, n_bins: int = 10) -> dict:
    slope, intercept, _ = calibration_fit(scores, labels, n_bins)
    return {"auroc": auroc(scores, labels), "brier": brier(scores, labels),
            "ece": ece(scores, labels, n_bins), "cal_slope": slope, "cal_intercept": intercept}
