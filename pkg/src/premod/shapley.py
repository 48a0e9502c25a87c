"""Shapley attributions for a scoring function over bucket matrices.

The value of a coalition is the model logit on the input with every cell of
the absent players set to zero, zero being the encoder's "nothing observed".
Players are groups of (bucket, feature) cells; cells outside every group stay
present throughout.

Two estimators: exact enumeration for up to 12 players, and a permutation
sampler in which each player draws its own permutations. Independent draws
cost more than shared ones but give honest per-player standard errors.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

MAX_EXACT_GROUPS = 12


class TooManyGroups(ValueError):
    pass


def feature_groups(T: int, D: int) -> list[np.ndarray]:
    """One player per feature column, covering every bucket."""
    out = []
    for d in range(D):
        m = np.zeros((T, D), dtype=bool)
        m[:, d] = True
        out.append(m)
    return out


def bucket_groups(T: int, D: int) -> list[np.ndarray]:
    out = []
    for t in range(T):
        m = np.zeros((T, D), dtype=bool)
        m[t, :] = True
        out.append(m)
    return out


def _check_groups(x, groups):
    groups = [np.asarray(g, dtype=bool) for g in groups]
    for g in groups:
        if g.shape != x.shape:
            raise ValueError(f"group mask shape {g.shape} does not match input {x.shape}")
    cover = np.sum(groups, axis=0) if groups else np.zeros(x.shape)
    if np.any(cover > 1):
        raise ValueError("groups overlap")
    return groups


def _values(f, x, groups, coalitions, batch: int = 512) -> np.ndarray:
    """v(S) for each boolean row of ``coalitions`` (n_coalitions x n_groups)."""
    G = np.stack(groups).reshape(len(groups), -1).astype(np.float64)
    out = np.empty(len(coalitions))
    flat = x.reshape(-1)
    for s in range(0, len(coalitions), batch):
        c = coalitions[s:s + batch].astype(np.float64)
        absent = (1.0 - c) @ G  # cells to zero
        X = flat[None, :] * (1.0 - absent)
        out[s:s + batch] = np.asarray(f(X.reshape((-1,) + x.shape)), dtype=np.float64)
    return out


@dataclass
class ExactResult:
    phi: np.ndarray
    v_all: float
    v_empty: float
    names: list[str] | None = None

    @property
    def efficiency_gap(self) -> float:
        return float(self.phi.sum() - (self.v_all - self.v_empty))


def shapley_exact(f, x, groups, names=None) -> ExactResult:
    """Exact Shapley values by enumerating all 2^n coalitions."""
    x = np.asarray(x, dtype=np.float64)
    groups = _check_groups(x, groups)
    n = len(groups)
    if n > MAX_EXACT_GROUPS:
        raise TooManyGroups(f"{n} groups; exact enumeration supports at most {MAX_EXACT_GROUPS}")
    if n == 0:
        v = float(np.asarray(f(x[None]))[0])
        return ExactResult(np.zeros(0), v, v, names)
    masks = np.arange(2 ** n)
    coal = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
    v = _values(f, x, groups, coal)
    size = coal.sum(axis=1)
    weight = np.array([math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n)
                       for k in range(n)])
    phi = np.zeros(n)
    for i in range(n):
        without = masks[~coal[:, i]]
        phi[i] = np.sum(weight[size[without]] * (v[without | (1 << i)] - v[without]))
    return ExactResult(phi, float(v[-1]), float(v[0]), names)


@dataclass
class MCResult:
    phi: np.ndarray
    se: np.ndarray
    n_permutations: int
    v_all: float
    v_empty: float
    names: list[str] | None = None

    @property
    def efficiency_gap(self) -> float:
        return float(self.phi.sum() - (self.v_all - self.v_empty))


def shapley_mc(f, x, groups, n_permutations: int = 64, seed: int = 0, names=None) -> MCResult:
    """Permutation-sampling estimate with per-player standard errors.

    For every player and draw, a fresh permutation fixes the set of players
    preceding it; the draw is the marginal gain v(S + i) - v(S).
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    groups = _check_groups(x, groups)
    n = len(groups)
    rng = np.random.default_rng(seed)
    ends = _values(f, x, groups, np.array([[True] * n, [False] * n]))
    if n == 0:
        return MCResult(np.zeros(0), np.zeros(0), n_permutations, float(ends[0]), float(ends[1]), names)
    # build all coalitions up front: row (i, k) holds S, paired with S + i
    before = np.zeros((n, n_permutations, n), dtype=bool)
    for i in range(n):
        for k in range(n_permutations):
            perm = rng.permutation(n)
            pos = int(np.flatnonzero(perm == i)[0])
            before[i, k, perm[:pos]] = True
    with_i = before.copy()
    with_i[np.arange(n), :, np.arange(n)] = True
    v = _values(f, x, groups, np.concatenate([before.reshape(-1, n), with_i.reshape(-1, n)]))
    half = n * n_permutations
    gains = (v[half:] - v[:half]).reshape(n, n_permutations)
    phi = gains.mean(axis=1)
    se = gains.std(axis=1, ddof=1) / math.sqrt(n_permutations) if n_permutations > 1 \
        else np.full(n, math.inf)
    return MCResult(phi, se, n_permutations, float(ends[0]), float(ends[1]), names)


# --------------------------------------------------------- cell tensors


@dataclass
class AttributionTensor:
    """Per-patient, per-bucket, per-feature attributions against the zero baseline."""

    values: np.ndarray  # N x T x D
    patient_ids: list[str]
    feature_names: list[str]

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("attribution tensor must be N x T x D")
        if len(self.patient_ids) != self.values.shape[0] or len(self.feature_names) != self.values.shape[2]:
            raise ValueError("attribution tensor shape does not match its labels")


def explain_cells(f, x, n_permutations: int = 32, seed: int = 0, max_cells: int | None = None):
    """Cell-level attributions for one T x D matrix.

    Zero cells are null players (masking them changes nothing), so only the
    non-zero cells are sampled. ``max_cells`` keeps the largest |x| cells as
    players and leaves the rest fixed at their observed values.
    Returns (phi T x D, se T x D, MCResult).
    """
    x = np.asarray(x, dtype=np.float64)
    cells = np.flatnonzero(x.reshape(-1) != 0)
    if max_cells is not None and len(cells) > max_cells:
        top = np.argsort(-np.abs(x.reshape(-1)[cells]), kind="mergesort")[:max_cells]
        cells = np.sort(cells[top])
    groups = []
    for c in cells:
        m = np.zeros(x.size, dtype=bool)
        m[c] = True
        groups.append(m.reshape(x.shape))
    res = shapley_mc(f, x, groups, n_permutations, seed)
    phi = np.zeros(x.size)
    se = np.zeros(x.size)
    phi[cells] = res.phi
    se[cells] = res.se
    return phi.reshape(x.shape), se.reshape(x.shape), res


def attribution_tensor(f, X, patient_ids, feature_names, n_permutations: int = 32, seed: int = 0,
                       max_cells: int | None = None) -> AttributionTensor:
    X = np.asarray(X, dtype=np.float64)
    S = np.zeros_like(X)
    for n in range(len(X)):
        S[n], _, _ = explain_cells(f, X[n], n_permutations, seed + n, max_cells)
    return AttributionTensor(S, list(patient_ids), list(feature_names))


def aggregate_feature(S: AttributionTensor, top_k: int = 20) -> list[tuple[str, float]]:
    """Features ranked by mean |phi| over patients and buckets; all-zero features are dropped."""
    score = np.abs(S.values).mean(axis=(0, 1))
    order = np.argsort(-score, kind="mergesort")
    return [(S.feature_names[j], float(score[j])) for j in order[:top_k] if score[j] > 0]


def aggregate_time(S: AttributionTensor) -> np.ndarray:
    """Mean |phi| per bucket (bucket 0 is the most recent)."""
    return np.abs(S.values).mean(axis=(0, 2))


def attributions_csv(S: AttributionTensor) -> str:
    """Rows ``patient_id,bucket,feature,phi`` for every non-zero attribution."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "bucket", "feature", "phi"])
    for n, t, d in zip(*np.nonzero(S.values)):
        w.writerow([S.patient_ids[n], int(t), S.feature_names[d], repr(float(S.values[n, t, d]))])
    return buf.getvalue()


def ranking_text(ranked) -> str:
    lines = [f"{'rank':>4}  {'feature':<16}{'mean |phi|':>12}"]
    for r, (name, v) in enumerate(ranked, 1):
        lines.append(f"{r:>4}  {name:<16}{v:>12.6f}")
    return "\n".join(lines) + "\n"
