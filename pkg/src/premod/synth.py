"""Synthetic multi-site cohorts with a planted pre-diagnostic signal.

Controls visit at Poisson times and emit baseline codes and healthy labs.
Cases additionally ramp up a designated group of "risk" codes and drift
designated labs toward abnormal values over the years before their index
date, following a smooth logistic ramp. Everything is derived from one seed.

Config file (JSON) keys, all optional except ``sites``::

    {
      "seed": 0,
      "sites": [{"name": "Rochester", "n_cases": 60, "n_controls": 1140,
                 "code_rate_scale": 1.0, "lab_shift": 0.0}, ...],
      "code_vocab_size": 64,
      "n_risk_codes": 4,
      "labs": [{"name": "hgb", "mean": 13.5, "sd": 1.2, "drift": -1.5}, ...],
      "signal_onset_years": 5.0,
      "visit_rate_per_year": 4.0,
      "risk_code_amplitude": 0.9,
      "min_history_years": 4.0,
      "max_history_years": 20.0
    }
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .ehr import DAYS_PER_YEAR, EventRecord, Kind, PatientRecord


class ConfigError(ValueError):
    pass


CASE_CODE = "C25"


@dataclass
class SiteSpec:
    name: str
    n_cases: int
    n_controls: int
    code_rate_scale: float = 1.0
    lab_shift: float = 0.0  # in lab-sd units


@dataclass
class LabSpec:
    name: str
    mean: float
    sd: float
    drift: float = 0.0  # signed shift at full ramp, in sd units


def default_labs() -> list[LabSpec]:
    return [
        LabSpec("hgb", 13.5, 1.2, -1.4),
        LabSpec("glu", 100.0, 12.0, 1.6),
        LabSpec("alb", 4.1, 0.35, -1.0),
        LabSpec("alt", 28.0, 9.0, 0.0),
        LabSpec("wbc", 7.0, 1.8, 0.0),
        LabSpec("plt", 250.0, 55.0, 0.0),
    ]


def default_sites() -> list[SiteSpec]:
    return [
        SiteSpec("Rochester", 60, 1140, 1.0, 0.0),
        SiteSpec("SiteB", 30, 570, 1.25, 0.3),
        SiteSpec("SiteC", 30, 570, 0.8, -0.3),
    ]


@dataclass
class SynthConfig:
    sites: list[SiteSpec] = field(default_factory=default_sites)
    code_vocab_size: int = 64
    n_risk_codes: int = 4
    labs: list[LabSpec] = field(default_factory=default_labs)
    signal_onset_years: float = 5.0
    visit_rate_per_year: float = 4.0
    risk_code_amplitude: float = 0.9
    baseline_risk_rate: float = 0.08
    min_history_years: float = 4.0
    max_history_years: float = 20.0
    seed: int = 0

    def __post_init__(self):
        self.sites = [s if isinstance(s, SiteSpec) else SiteSpec(**s) for s in self.sites]
        self.labs = [lab if isinstance(lab, LabSpec) else LabSpec(**lab) for lab in self.labs]
        if self.code_vocab_size <= 0:
            raise ConfigError("code vocabulary is empty")
        if not self.labs:
            raise ConfigError("lab panel is empty")
        if not self.sites:
            raise ConfigError("no sites configured")
        if not 0 <= self.n_risk_codes < self.code_vocab_size:
            raise ConfigError("n_risk_codes must leave room for baseline codes")
        for s in self.sites:
            if s.n_cases <= 0 or s.n_controls <= 0:
                raise ConfigError(f"site {s.name}: counts must be positive")
        if self.min_history_years < 3.5 or self.max_history_years < self.min_history_years:
            raise ConfigError("history range must start at >= 3.5 years")
        if self.signal_onset_years > self.max_history_years:
            raise ConfigError("signal onset exceeds history length")

    @property
    def code_vocab(self) -> list[str]:
        return [f"K{i:03d}" for i in range(self.code_vocab_size)]

    @property
    def risk_codes(self) -> list[str]:
        return self.code_vocab[: self.n_risk_codes]

    @property
    def lab_vocab(self) -> list[str]:
        return [lab.name for lab in self.labs]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SynthConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def child_seed(seed: int, *names) -> np.random.SeedSequence:
    keys = [zlib.crc32(str(n).encode("utf-8")) for n in names]
    return np.random.SeedSequence([seed, *keys])


def ramp(years_before: np.ndarray, onset: float) -> np.ndarray:
    """Logistic ramp: ~1 at the index date, ~0 beyond ``onset`` years before it.

    Centred at 0.6 * onset so that part of the signal survives a one or two
    year lead-time exclusion.
    """
    return 1.0 / (1.0 + np.exp((np.asarray(years_before) - 0.6 * onset) / (onset / 8.0)))


def _code_weights(cfg: SynthConfig, site_idx: int) -> np.ndarray:
    n = cfg.code_vocab_size - cfg.n_risk_codes
    w = 1.0 / np.arange(1, n + 1) ** 0.8
    rng = np.random.default_rng(child_seed(cfg.seed, "site-codes", site_idx))
    w = w * rng.uniform(0.7, 1.3, n)
    return w / w.sum()


def _patient(cfg: SynthConfig, site_idx: int, site: SiteSpec, k: int, is_case: bool,
             weights: np.ndarray) -> PatientRecord:
    tag = "case" if is_case else "ctrl"
    pid = f"{site.name}-{tag}-{k:05d}"
    rng = np.random.default_rng(child_seed(cfg.seed, site.name, tag, k))
    index_day = int(rng.integers(20000, 25000))
    age = rng.uniform(50.0, 85.0)
    birth_day = int(round(index_day - age * DAYS_PER_YEAR))
    sex = "F" if rng.random() < 0.45 else "M"
    hist_years = rng.uniform(cfg.min_history_years, cfg.max_history_years)
    start = int(index_day - round(hist_years * DAYS_PER_YEAR))
    end = index_day if is_case else index_day + 365

    rate = cfg.visit_rate_per_year * site.code_rate_scale / DAYS_PER_YEAR
    n_visits = rng.poisson(rate * (end - start))
    days = np.sort(rng.integers(start + 1, end, size=n_visits)) if n_visits else np.zeros(0, int)
    days = np.concatenate([[start], days])
    if not is_case:
        days = np.concatenate([days, [end]])

    setpoint = rng.normal(0.0, 0.5, len(cfg.labs))
    years_before = (index_day - days) / DAYS_PER_YEAR
    signal = ramp(years_before, cfg.signal_onset_years) if is_case else np.zeros(len(days))
    signal = np.where(days < index_day, signal, 0.0)
    risk_codes = cfg.risk_codes
    base_codes = cfg.code_vocab[cfg.n_risk_codes:]

    events = []
    for v, day in enumerate(days):
        day = int(day)
        n_codes = 1 + rng.poisson(1.2)
        for j in rng.choice(len(base_codes), size=n_codes, p=weights):
            events.append(EventRecord(pid, day, Kind.DIAGNOSIS, base_codes[j]))
        lam = cfg.baseline_risk_rate * site.code_rate_scale + cfg.risk_code_amplitude * signal[v]
        for _ in range(rng.poisson(lam)):
            events.append(EventRecord(pid, day, Kind.DIAGNOSIS, risk_codes[rng.integers(len(risk_codes))]))
        measure_all = v == 0
        if measure_all or rng.random() < 0.6:
            for li, lab in enumerate(cfg.labs):
                if not measure_all and rng.random() >= 0.5:
                    continue
                z = site.lab_shift + setpoint[li] + rng.normal(0.0, 0.7) + lab.drift * signal[v]
                events.append(EventRecord(pid, day, Kind.LAB, lab.name, float(lab.mean + lab.sd * z)))
    if is_case:
        events.append(EventRecord(pid, index_day, Kind.DIAGNOSIS, CASE_CODE))
    events.sort(key=lambda e: e.day)
    return PatientRecord(pid, sex, birth_day, site.name, tuple(events))


def generate(cfg: SynthConfig) -> list[PatientRecord]:
    """All patients, grouped by site, cases before controls."""
    patients = []
    for si, site in enumerate(cfg.sites):
        weights = _code_weights(cfg, si)
        for k in range(site.n_cases):
            patients.append(_patient(cfg, si, site, k, True, weights))
        for k in range(site.n_controls):
            patients.append(_patient(cfg, si, site, k, False, weights))
    return patients
