"""Patient event records, event-file IO and case/control cohort selection."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

log = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.25

DEFAULT_CASE_PREFIXES = frozenset({"157", "C25"})
DEFAULT_CONTROL_EXCLUDED = frozenset({
    "C15", "C16", "C17", "C18", "C19", "C20", "C21", "C25", "D00", "D01", "C7A",
    "150", "151", "152", "153", "154", "155", "156", "157", "230",
})


class Kind(str, Enum):
    DIAGNOSIS = "Diagnosis"
    LAB = "Lab"


class Label(str, Enum):
    CASE = "Case"
    CONTROL = "Control"


class MatchExhausted(RuntimeError):
    pass


class EventFileError(ValueError):
    pass


def normalize_code(code: str) -> str:
    return code.replace(".", "").strip().upper()


@dataclass(frozen=True)
class EventRecord:
    patient_id: str
    day: int
    kind: Kind
    code: str
    value: float | None = None

    def __post_init__(self):
        if (self.kind == Kind.LAB) != (self.value is not None):
            raise ValueError(f"value must be present exactly for lab events: {self}")
        if self.value is not None and not math.isfinite(self.value):
            raise ValueError(f"non-finite lab value: {self}")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    sex: str
    birth_day: int
    site: str
    events: tuple[EventRecord, ...] = ()

    def __post_init__(self):
        days = [e.day for e in self.events]
        if any(b < a for a, b in zip(days, days[1:])):
            raise ValueError(f"events of {self.patient_id} are not sorted by day")

    def age_years(self, day: int) -> float:
        return (day - self.birth_day) / DAYS_PER_YEAR


@dataclass
class CohortSpec:
    case_code_prefixes: frozenset = DEFAULT_CASE_PREFIXES
    control_excluded_prefixes: frozenset = DEFAULT_CONTROL_EXCLUDED
    min_age_years: float = 18.0
    min_history_years: float = 3.0
    min_lab_measurements: int = 3
    lab_panel: frozenset | None = None  # None: every lab code counts
    control_index_offset_days: int = 365
    matching_ratio: int = 29
    history_years: float = 20.0
    age_caliper_years: float = 2.0
    per_test_lab_rule: bool = False

    def __post_init__(self):
        if self.matching_ratio < 1:
            raise ValueError("matching_ratio must be >= 1")
        for name in ("min_age_years", "min_history_years", "min_lab_measurements",
                     "control_index_offset_days", "history_years"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class LabeledPatient:
    patient: PatientRecord
    label: Label
    index_day: int

    @property
    def patient_id(self):
        return self.patient.patient_id

    @property
    def y(self) -> int:
        return int(self.label == Label.CASE)


@dataclass
class SelectionReport:
    """Per-reason exclusion counts (cohort flowchart)."""

    considered: int = 0
    included: int = 0
    excluded: Counter = field(default_factory=Counter)


def _has_prefix(code: str, prefixes) -> bool:
    code = normalize_code(code)
    return any(code.startswith(p) for p in prefixes)


def _in_panel(e: EventRecord, spec: CohortSpec) -> bool:
    return e.kind == Kind.LAB and (spec.lab_panel is None or e.code in spec.lab_panel)


def _exclusion_reason(patient: PatientRecord, index_day: int, spec: CohortSpec) -> str | None:
    if patient.age_years(index_day) < spec.min_age_years:
        return "age"
    prior = [e for e in patient.events if e.day < index_day]
    if not prior or (index_day - prior[0].day) / DAYS_PER_YEAR < spec.min_history_years:
        return "history"
    lo = index_day - spec.history_years * DAYS_PER_YEAR
    labs = [e for e in prior if e.day >= lo and _in_panel(e, spec)]
    if not labs:
        return "no_labs"
    if spec.per_test_lab_rule:
        per_test = Counter(e.code for e in labs)
        if min(per_test.values()) < spec.min_lab_measurements:
            return "few_labs"
    elif len(labs) < spec.min_lab_measurements:
        return "few_labs"
    return None


def truncate_history(patient: PatientRecord, index_day: int, years: float = 20.0) -> PatientRecord:
    """Keep events in [index_day - years, index_day]."""
    lo = index_day - years * DAYS_PER_YEAR
    kept = tuple(e for e in patient.events if lo <= e.day <= index_day)
    return replace(patient, events=kept)


def select_cases(patients, spec: CohortSpec | None = None, report: SelectionReport | None = None):
    spec = spec or CohortSpec()
    report = report if report is not None else SelectionReport()
    out = []
    for p in patients:
        first = next((e for e in p.events if e.kind == Kind.DIAGNOSIS
                      and _has_prefix(e.code, spec.case_code_prefixes)), None)
        if first is None:
            continue
        report.considered += 1
        reason = _exclusion_reason(p, first.day, spec)
        if reason:
            report.excluded[reason] += 1
            continue
        report.included += 1
        out.append(LabeledPatient(truncate_history(p, first.day, spec.history_years),
                                  Label.CASE, first.day))
    return out


def select_controls(patients, spec: CohortSpec | None = None, report: SelectionReport | None = None):
    spec = spec or CohortSpec()
    report = report if report is not None else SelectionReport()
    out = []
    for p in patients:
        if not p.events:
            continue
        report.considered += 1
        if any(e.kind == Kind.DIAGNOSIS and _has_prefix(e.code, spec.control_excluded_prefixes)
               for e in p.events):
            report.excluded["excluded_code"] += 1
            continue
        index_day = p.events[-1].day - spec.control_index_offset_days
        reason = _exclusion_reason(p, index_day, spec)
        if reason:
            report.excluded[reason] += 1
            continue
        report.included += 1
        out.append(LabeledPatient(truncate_history(p, index_day, spec.history_years),
                                  Label.CONTROL, index_day))
    return out


@dataclass
class MatchResult:
    matched: list
    pairs: dict  # case id -> list of control ids
    unmatched_cases: list
    saturated_cases: list

    @property
    def achieved_ratio(self) -> float:
        n_cases = len(self.pairs)
        return sum(len(v) for v in self.pairs.values()) / n_cases if n_cases else 0.0


def match_controls(cases, controls, spec: CohortSpec | None = None, seed: int = 0,
                   strict: bool = False) -> MatchResult:
    """Sex- and age-matched sampling of up to ``matching_ratio`` controls per case.

    Controls are drawn without replacement across the whole cohort. A case with
    no eligible control is kept unmatched (or raises MatchExhausted if strict).
    """
    spec = spec or CohortSpec()
    if not controls:
        raise MatchExhausted("no controls available for matching")
    rng = np.random.default_rng(seed)
    ages = np.array([c.patient.age_years(c.index_day) for c in controls])
    sexes = np.array([c.patient.sex for c in controls])
    used = np.zeros(len(controls), dtype=bool)
    pairs, unmatched, saturated = {}, [], []
    for case in sorted(cases, key=lambda c: c.patient_id):
        age = case.patient.age_years(case.index_day)
        ok = (~used) & (sexes == case.patient.sex) & (np.abs(ages - age) <= spec.age_caliper_years)
        eligible = np.flatnonzero(ok)
        if eligible.size == 0:
            msg = f"case {case.patient_id}: no eligible controls"
            if strict:
                raise MatchExhausted(msg)
            log.warning(msg)
            unmatched.append(case.patient_id)
            pairs[case.patient_id] = []
            continue
        k = min(spec.matching_ratio, eligible.size)
        if k < spec.matching_ratio:
            log.warning("case %s: only %d of %d controls available", case.patient_id, k,
                        spec.matching_ratio)
            saturated.append(case.patient_id)
        pick = rng.choice(eligible, size=k, replace=False)
        used[pick] = True
        pairs[case.patient_id] = [controls[i].patient_id for i in sorted(pick)]
    matched = list(sorted(cases, key=lambda c: c.patient_id))
    matched += [controls[i] for i in np.flatnonzero(used)]
    return MatchResult(matched, pairs, unmatched, saturated)


# ---------------------------------------------------------------- file IO


def write_events(patients, events_path, demographics_path):
    with open(events_path, "w", encoding="utf-8", newline="") as fh:
        for p in patients:
            for e in p.events:
                value = "" if e.value is None else repr(float(e.value))
                fh.write(f"{e.patient_id}\t{e.day}\t{e.kind.value}\t{e.code}\t{value}\n")
    with open(demographics_path, "w", encoding="utf-8", newline="") as fh:
        for p in patients:
            fh.write(f"{p.patient_id}\t{p.sex}\t{p.birth_day}\t{p.site}\n")


def read_events(events_path, demographics_path) -> list[PatientRecord]:
    demo = {}
    with open(demographics_path, encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 4:
                raise EventFileError(f"{demographics_path}:{lineno}: expected 4 fields")
            demo[row[0]] = (row[1], int(row[2]), row[3])
    events = defaultdict(list)
    with open(events_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise EventFileError(f"{events_path}:{lineno}: expected 5 tab-separated fields")
            pid, day, kind, code, value = parts
            try:
                kind = Kind(kind)
                ev = EventRecord(pid, int(day), kind, code, float(value) if value else None)
            except ValueError as exc:
                raise EventFileError(f"{events_path}:{lineno}: {exc}") from exc
            events[pid].append(ev)
    patients = []
    for pid, (sex, birth, site) in demo.items():
        # stable sort keeps within-day order from the file
        evs = sorted(events.get(pid, []), key=lambda e: e.day)
        patients.append(PatientRecord(pid, sex, birth, site, tuple(evs)))
    return patients


def write_cohort(labeled, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("patient_id\tlabel\tindex_day\tsite\n")
        for lp in labeled:
            fh.write(f"{lp.patient_id}\t{lp.label.value}\t{lp.index_day}\t{lp.patient.site}\n")


def read_cohort(path, patients) -> list[LabeledPatient]:
    by_id = {p.patient_id: p for p in patients}
    out = []
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            p = by_id.get(row["patient_id"])
            if p is None:
                raise EventFileError(f"cohort patient {row['patient_id']} missing from event file")
            index_day = int(row["index_day"])
            out.append(LabeledPatient(truncate_history(p, index_day), Label(row["label"]), index_day))
    return out


def load_or_build_cohort(patients, spec: CohortSpec | None = None):
    """Cases + controls (unmatched) with a combined selection report."""
    spec = spec or CohortSpec()
    rc, rk = SelectionReport(), SelectionReport()
    cases = select_cases(patients, spec, rc)
    case_ids = {c.patient_id for c in cases}
    controls = select_controls([p for p in patients if p.patient_id not in case_ids], spec, rk)
    return cases, controls, rc, rk

