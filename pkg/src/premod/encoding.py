"""Time-bucketed encoding of event histories into T x D matrices.

Bucket t covers days [index - (t+1)*tau, index - t*tau); t = 0 is the bucket
right before the index date. Columns 0..C-1 hold diagnosis-code counts,
columns C..C+L-1 hold per-bucket lab means (z-scored unless ``standardize``
is off; 0 where a lab was not measured).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .ehr import Kind, LabeledPatient
from .model import vocab_fingerprint

MATRIX_MAGIC = b"PMBM1"
LEAD_DAYS_PER_YEAR = 365


class VocabEmpty(ValueError):
    pass


@dataclass
class EncoderConfig:
    code_vocab: list[str]
    lab_vocab: list[str]
    tau_days: int = 30
    T: int = 240
    lab_stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    standardize: bool = True

    def __post_init__(self):
        self.code_vocab = list(self.code_vocab)
        self.lab_vocab = list(self.lab_vocab)
        if not self.code_vocab and not self.lab_vocab:
            raise VocabEmpty("encoder needs at least one code or lab")
        if len(set(self.code_vocab)) != len(self.code_vocab) or len(set(self.lab_vocab)) != len(self.lab_vocab):
            raise ValueError("vocabularies must be duplicate-free")
        if self.T <= 0 or self.tau_days <= 0:
            raise ValueError("T and tau_days must be positive")
        self.lab_stats = {k: (float(v[0]), float(v[1])) for k, v in self.lab_stats.items()}
        self._code_index = {c: i for i, c in enumerate(self.code_vocab)}
        self._lab_index = {c: i for i, c in enumerate(self.lab_vocab)}

    @property
    def C(self) -> int:
        return len(self.code_vocab)

    @property
    def L(self) -> int:
        return len(self.lab_vocab)

    @property
    def D(self) -> int:
        return self.C + self.L

    @property
    def feature_names(self) -> list[str]:
        return self.code_vocab + self.lab_vocab

    def fingerprints(self) -> dict[str, str]:
        return {"code_vocab": vocab_fingerprint(self.code_vocab),
                "lab_vocab": vocab_fingerprint(self.lab_vocab)}

    def to_dict(self) -> dict:
        return {"code_vocab": self.code_vocab, "lab_vocab": self.lab_vocab,
                "tau_days": self.tau_days, "T": self.T,
                "lab_stats": {k: list(v) for k, v in self.lab_stats.items()},
                "standardize": self.standardize}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class BucketMatrix:
    values: np.ndarray
    index_day: int
    patient_id: str
    label: int
    site: str = ""
    # None: raw (training) matrix; otherwise the lead-time window already zeroed
    lead_years: float | None = None
    tau_days: int = 30
    n_ignored: int = 0

    @property
    def is_lead_excluded(self) -> bool:
        return self.lead_years is not None


def vocab_from_patients(patients) -> tuple[list[str], list[str]]:
    """Sorted diagnosis codes and lab names seen before each patient's index date."""
    codes, labs = set(), set()
    for lp in patients:
        for e in lp.patient.events:
            if e.day >= lp.index_day:
                continue
            (labs if e.kind == Kind.LAB else codes).add(e.code)
    return sorted(codes), sorted(labs)


def fit_lab_standardization(patients, lab_vocab) -> dict[str, tuple[float, float]]:
    """Per-lab (mean, sd) over raw values observed before each index date."""
    values = {name: [] for name in lab_vocab}
    for lp in patients:
        for e in lp.patient.events:
            if e.kind == Kind.LAB and e.day < lp.index_day and e.code in values:
                values[e.code].append(e.value)
    stats = {}
    for name, vals in values.items():
        if vals:
            arr = np.asarray(vals)
            sd = float(arr.std())
            stats[name] = (float(arr.mean()), sd if sd > 0 else 1.0)
        else:
            stats[name] = (0.0, 1.0)
    return stats


class _EventArrays:
    """Vocabulary-resolved event columns for one patient."""

    def __init__(self, lp: LabeledPatient, cfg: EncoderConfig):
        d_days, d_col, l_days, l_col, l_val = [], [], [], [], []
        ignored = 0
        for e in lp.patient.events:
            if e.kind == Kind.DIAGNOSIS:
                j = cfg._code_index.get(e.code)
                if j is None:
                    ignored += 1
                    continue
                d_days.append(e.day)
                d_col.append(j)
            else:
                j = cfg._lab_index.get(e.code)
                if j is None:
                    ignored += 1
                    continue
                l_days.append(e.day)
                l_col.append(j)
                l_val.append(e.value)
        self.d_days = np.asarray(d_days, dtype=np.int64)
        self.d_col = np.asarray(d_col, dtype=np.int64)
        self.l_days = np.asarray(l_days, dtype=np.int64)
        self.l_col = np.asarray(l_col, dtype=np.int64)
        self.l_val = np.asarray(l_val, dtype=np.float64)
        self.ignored = ignored

    def matrix(self, end_day: int, cfg: EncoderConfig) -> np.ndarray:
        T, tau, C = cfg.T, cfg.tau_days, cfg.C
        out = np.zeros((T, cfg.D))
        t = (end_day - self.d_days - 1) // tau
        keep = (self.d_days < end_day) & (t < T)
        np.add.at(out, (t[keep], self.d_col[keep]), 1.0)

        t = (end_day - self.l_days - 1) // tau
        keep = (self.l_days < end_day) & (t < T)
        if keep.any():
            sums = np.zeros((T, cfg.L))
            counts = np.zeros((T, cfg.L))
            np.add.at(sums, (t[keep], self.l_col[keep]), self.l_val[keep])
            np.add.at(counts, (t[keep], self.l_col[keep]), 1.0)
            seen = counts > 0
            means = np.divide(sums, counts, out=np.zeros_like(sums), where=seen)
            if cfg.standardize:
                mu = np.array([cfg.lab_stats.get(n, (0.0, 1.0))[0] for n in cfg.lab_vocab])
                sd = np.array([cfg.lab_stats.get(n, (0.0, 1.0))[1] for n in cfg.lab_vocab])
                means = np.where(seen, (means - mu) / sd, 0.0)
            out[:, C:] = means
        return out


def encode(lp: LabeledPatient, cfg: EncoderConfig) -> BucketMatrix:
    ev = _EventArrays(lp, cfg)
    return BucketMatrix(ev.matrix(lp.index_day, cfg), lp.index_day, lp.patient_id, lp.y,
                        lp.patient.site, None, cfg.tau_days, ev.ignored)


def lead_buckets(lead_years: float, tau_days: int) -> int:
    """Number of leading buckets whose interval meets the final ``lead_years``."""
    if lead_years <= 0:
        return 0
    return math.ceil(lead_years * LEAD_DAYS_PER_YEAR / tau_days)


def exclude_lead_time(m: BucketMatrix, lead_years: float) -> BucketMatrix:
    """Zero buckets intersecting (index - lead, index); tags the result as lead-excluded."""
    if lead_years < 0:
        raise ValueError("lead_years must be >= 0")
    values = m.values.copy()
    values[:lead_buckets(lead_years, m.tau_days)] = 0.0
    prior = m.lead_years or 0.0
    return replace(m, values=values, lead_years=max(prior, float(lead_years)))


def sliding_windows(lp: LabeledPatient, cfg: EncoderConfig, step_days: int = 30,
                    max_windows: int | None = None):
    """Matrices for virtual index dates index_day, index_day - step, ... back over the record.

    ``max_windows`` keeps only the most recent windows. Returns a list of
    (window_end_day, BucketMatrix), oldest window first.
    """
    if step_days <= 0:
        raise ValueError("step_days must be positive")
    events = lp.patient.events
    first = events[0].day if events else lp.index_day
    span = max(lp.index_day - first, 0)
    n = max(1, math.ceil(span / step_days))
    if max_windows is not None:
        n = min(n, max(1, max_windows))
    ev = _EventArrays(lp, cfg)
    out = []
    for k in reversed(range(n)):
        end = lp.index_day - k * step_days
        out.append((end, BucketMatrix(ev.matrix(end, cfg), end, lp.patient_id, lp.y,
                                      lp.patient.site, None, cfg.tau_days, ev.ignored)))
    return out


def encode_many(patients, cfg: EncoderConfig, lead_years: float | None = None):
    mats = [encode(lp, cfg) for lp in patients]
    if lead_years is not None:
        mats = [exclude_lead_time(m, lead_years) for m in mats]
    return mats


def stack(mats) -> tuple[np.ndarray, np.ndarray]:
    if not mats:
        return np.zeros((0, 0, 0)), np.zeros(0, dtype=int)
    return np.stack([m.values for m in mats]), np.array([m.label for m in mats])


# ---------------------------------------------------------------- dumps


def dump_matrices(mats, cfg: EncoderConfig) -> bytes:
    header = {
        "T": cfg.T, "C": cfg.C, "L": cfg.L, "tau_days": cfg.tau_days,
        **cfg.fingerprints(),
        "records": [{"patient_id": m.patient_id, "index_day": int(m.index_day),
                     "label": int(m.label), "site": m.site, "lead_years": m.lead_years}
                    for m in mats],
    }
    block = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MATRIX_MAGIC)
    buf.write(struct.pack("<Q", len(block)))
    buf.write(block)
    for m in mats:
        buf.write(np.ascontiguousarray(m.values, dtype="<f8").tobytes())
    return buf.getvalue()


def load_matrices(blob: bytes) -> tuple[list[BucketMatrix], dict]:
    n_magic = len(MATRIX_MAGIC)
    if blob[:n_magic] != MATRIX_MAGIC:
        raise ValueError("not a bucket-matrix dump")
    (hlen,) = struct.unpack("<Q", blob[n_magic:n_magic + 8])
    start = n_magic + 8
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    T, D = header["T"], header["C"] + header["L"]
    data = np.frombuffer(blob, dtype="<f8", offset=start + hlen)
    recs = header["records"]
    if data.size != len(recs) * T * D:
        raise ValueError("matrix dump payload size does not match header")
    data = data.reshape(len(recs), T, D).astype(np.float64)
    mats = [BucketMatrix(data[i].copy(), r["index_day"], r["patient_id"], r["label"], r["site"],
                         r["lead_years"], header["tau_days"]) for i, r in enumerate(recs)]
    return mats, header


def matrices_csv(mats, cfg: EncoderConfig) -> str:
    """Sparse debug listing of non-zero cells."""
    names = cfg.feature_names
    lines = ["patient_id,bucket,feature,value"]
    for m in mats:
        for t, j in zip(*np.nonzero(m.values)):
            lines.append(f"{m.patient_id},{t},{names[j]},{float(m.values[t, j])!r}")
    return "\n".join(lines) + "\n"
