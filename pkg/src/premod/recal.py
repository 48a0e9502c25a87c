"""Prevalence-aware recalibration by a constant logit shift.

Posterior odds factor into prior odds times a likelihood ratio. Moving a
model from the prior odds it was trained under (``pi_src``) to those of a
target population (``pi_tar``) therefore multiplies its odds by
pi_tar / pi_src, i.e. adds ln(pi_tar) - ln(pi_src) to every logit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import _sigmoid


class OutOfRange(ValueError):
    pass


CLAMP = 1e-15


def prevalence_to_odds(prevalence: float) -> float:
    if not 0.0 < prevalence < 1.0:
        raise OutOfRange(f"prevalence must lie in (0, 1), got {prevalence}")
    return prevalence / (1.0 - prevalence)


def odds_from_counts(n_cases: int, n_controls: int) -> float:
    if n_cases <= 0 or n_controls <= 0:
        raise OutOfRange("need at least one case and one control")
    return n_cases / n_controls


@dataclass(frozen=True)
class RecalSpec:
    pi_src: float
    pi_tar: float

    def __post_init__(self):
        if not (self.pi_src > 0 and self.pi_tar > 0):
            raise OutOfRange("prior odds must be positive")
        if not math.isfinite(self.delta):
            raise OutOfRange("logit shift is not finite")

    @property
    def delta(self) -> float:
        return math.log(self.pi_tar) - math.log(self.pi_src)

    @classmethod
    def from_prevalence(cls, pi_src: float, target_prevalence: float) -> "RecalSpec":
        return cls(pi_src, prevalence_to_odds(target_prevalence))

    def then(self, other: "RecalSpec") -> "RecalSpec":
        """Chain src -> mid -> tar; requires self.pi_tar == other.pi_src."""
        if not math.isclose(self.pi_tar, other.pi_src, rel_tol=1e-12):
            raise ValueError("recalibrations do not chain")
        return RecalSpec(self.pi_src, other.pi_tar)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def recalibrate_logit(z_u, spec: RecalSpec):
    return np.asarray(z_u, dtype=np.float64) + spec.delta if np.ndim(z_u) else float(z_u) + spec.delta


def recalibrate_prob(p_u, spec: RecalSpec):
    p = np.asarray(p_u, dtype=np.float64)
    if np.any((p <= CLAMP) | (p >= 1.0 - CLAMP)):
        warnings.warn("probabilities at 0 or 1 clamped before recalibration", RuntimeWarning,
                      stacklevel=2)
        p = np.clip(p, CLAMP, 1.0 - CLAMP)
    out = _sigmoid(np.atleast_1d(logit(p) + spec.delta)).reshape(p.shape)
    return float(out) if out.ndim == 0 else out
