"""Continuous risk monitoring over sliding windows.

Each patient is re-scored as if the index date were 0, 1, 2, ... steps
earlier. A step of 30 days is reported as one month.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .autodiff import _sigmoid
from .encoding import EncoderConfig, sliding_windows
from .recal import RecalSpec, recalibrate_logit

DAYS_PER_MONTH = 30


@dataclass
class RiskTrajectory:
    patient_id: str
    label: int
    months_before_index: np.ndarray  # descending: oldest first
    probability: np.ndarray

    def __len__(self):
        return len(self.probability)


def patient_trajectory(lp, model, enc: EncoderConfig, step_days: int = 30,
                       max_windows: int | None = None, recal: RecalSpec | None = None) -> RiskTrajectory:
    """Score every sliding window of one patient; ``model`` maps (B, T, D) to logits."""
    windows = sliding_windows(lp, enc, step_days, max_windows)
    X = np.stack([m.values for _, m in windows])
    z = np.asarray(model(X), dtype=np.float64)
    if recal is not None:
        z = recalibrate_logit(z, recal)
    months = np.array([(lp.index_day - end) // DAYS_PER_MONTH for end, _ in windows], dtype=int)
    return RiskTrajectory(lp.patient_id, lp.y, months, _sigmoid(z))


def cohort_trajectories(patients, model, enc: EncoderConfig, step_days: int = 30,
                        max_windows: int | None = None, recal: RecalSpec | None = None):
    return [patient_trajectory(p, model, enc, step_days, max_windows, recal) for p in patients]


@dataclass
class GroupCurve:
    group: str
    months_before_index: np.ndarray  # ascending
    center: np.ndarray
    q1: np.ndarray
    q3: np.ndarray
    n: np.ndarray


def _group_name(label: int) -> str:
    return "case" if label == 1 else "control"


def cohort_curves(trajectories, stat: str = "median") -> dict[str, GroupCurve]:
    """Align on months before index and summarise each group.

    ``stat`` is "median" (band = quartiles) or "mean" (band = mean +/- sd).
    """
    if stat not in ("median", "mean"):
        raise ValueError("stat must be 'median' or 'mean'")
    pools: dict[str, dict[int, list[float]]] = {}
    for tr in trajectories:
        g = pools.setdefault(_group_name(tr.label), {})
        for m, p in zip(tr.months_before_index, tr.probability):
            g.setdefault(int(m), []).append(float(p))
    out = {}
    for name in sorted(pools):
        months = np.array(sorted(pools[name]), dtype=int)
        vals = [np.asarray(pools[name][m]) for m in months]
        if stat == "median":
            center = np.array([np.median(v) for v in vals])
            q1 = np.array([np.quantile(v, 0.25) for v in vals])
            q3 = np.array([np.quantile(v, 0.75) for v in vals])
        else:
            center = np.array([v.mean() for v in vals])
            sd = np.array([v.std() for v in vals])
            q1, q3 = center - sd, center + sd
        out[name] = GroupCurve(name, months, center, q1, q3, np.array([len(v) for v in vals]))
    return out


def curves_csv(curves: dict[str, GroupCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "months_before_index", "median", "q1", "q3"])
    for name in sorted(curves):
        c = curves[name]
        for row in zip(c.months_before_index, c.center, c.q1, c.q3):
            w.writerow([name, int(row[0]), repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])
    return buf.getvalue()


def trajectories_csv(trajectories) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "label", "months_before_index", "probability"])
    for tr in trajectories:
        for m, p in zip(tr.months_before_index, tr.probability):
            w.writerow([tr.patient_id, tr.label, int(m), repr(float(p))])
    return buf.getvalue()
