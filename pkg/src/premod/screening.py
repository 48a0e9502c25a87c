"""Multi-stage Bayesian screening cascade.

Each stage tests everyone who screened positive at the previous stage.
Positives at stage s:  N_s+ = [sens_s * P_s + (1 - spec_s) * (1 - P_s)] * N_s,
and the next stage sees prevalence P_{s+1} = sens_s P_s / (N_s+ / N_s).

A stage may only be able to detect a fraction of the true cases
(``capture_fraction``); the undetectable cases are still tested and screen
positive at the false-positive rate, but never count as detections.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .metrics import ConfusionCounts, PriorPrevalence, dor, threshold_table


class DegenerateStage(ValueError):
    pass


class WeightSum(ValueError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScreeningStage:
    name: str
    sensitivity: float
    specificity: float
    capture_fraction: float = 1.0

    def __post_init__(self):
        # specificity 1 is allowed so that a perfect scorer can be packaged as a stage
        if not 0.0 <= self.sensitivity <= 1.0 or not 0.0 <= self.specificity <= 1.0:
            raise ValueError(f"stage {self.name}: sensitivity in (0,1], specificity in [0,1]")
        if self.sensitivity == 0.0:
            raise DegenerateStage(f"stage {self.name} has zero sensitivity")
        if not 0.0 < self.capture_fraction <= 1.0:
            raise ValueError(f"stage {self.name}: capture_fraction must be in (0, 1]")

    @property
    def lr_positive(self) -> float:
        fpr = 1.0 - self.specificity
        return self.sensitivity / fpr if fpr > 0 else math.inf


@dataclass(frozen=True)
class AgeGroupRate:
    rate: float
    weight: float


def asr(groups) -> float:
    """Age-standardised rate: sum of rate_i * weight_i."""
    groups = list(groups)
    total = sum(g.weight for g in groups)
    if abs(total - 1.0) > 1e-9:
        raise WeightSum(f"age-group weights sum to {total}, not 1")
    return sum(g.rate * g.weight for g in groups)


@dataclass
class StageRow:
    name: str
    population: float  # N_s
    prevalence: float  # P_s
    positives: float  # N_s+
    cases_in: float  # true cases entering the stage
    cases_detected: float  # true cases screening positive


@dataclass
class CascadeResult:
    stages: list[StageRow]
    detected: float
    nns: float
    nns_base: float
    efficiency: float
    ppv: float

    @property
    def final_positives(self) -> float:
        return self.stages[-1].positives


def run_cascade(prior_prevalence: float, population: float, stages) -> CascadeResult:
    stages = list(stages)
    if not stages:
        raise ScenarioError("a cascade needs at least one stage")
    if not 0.0 < prior_prevalence < 1.0:
        raise ScenarioError("prior prevalence must lie in (0, 1)")
    n, cases = float(population), float(prior_prevalence) * population
    rows = []
    for st in stages:
        p = cases / n
        detectable = st.capture_fraction * cases
        detected = st.sensitivity * detectable
        positives = detected + (1.0 - st.specificity) * (n - detectable)
        rows.append(StageRow(st.name, n, p, positives, cases, detected))
        n, cases = positives, detected
    last = stages[-1]
    p_last = rows[-1].prevalence
    nns = 1.0 / (p_last * last.sensitivity)
    nns_base = 1.0 / (prior_prevalence * last.sensitivity)
    detected = rows[-1].cases_detected
    return CascadeResult(rows, detected, nns, nns_base, nns_base / nns, detected / rows[-1].positives)


# ------------------------------------------------------------ scenarios


@dataclass
class Scenario:
    name: str
    stages: list[ScreeningStage]
    population: float = 100_000
    prevalence: float | None = None
    age_groups: list[AgeGroupRate] = field(default_factory=list)

    def prior(self) -> float:
        if self.prevalence is not None:
            return self.prevalence
        if self.age_groups:
            return asr(self.age_groups)
        raise ScenarioError(f"scenario {self.name}: give prevalence or age_groups")

    def run(self) -> CascadeResult:
        return run_cascade(self.prior(), self.population, self.stages)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            stages = [ScreeningStage(**s) for s in d["stages"]]
            groups = [AgeGroupRate(**g) for g in d.get("age_groups", [])]
            return cls(d.get("name", "scenario"), stages, float(d.get("population", 100_000)),
                       d.get("prevalence"), groups)
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"bad scenario: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


PREMOD_STAGE = ScreeningStage("PREMOD", 0.953, 0.552)
REDMOD_STAGE = ScreeningStage("REDMOD", 0.73, 0.81)
EUS_STAGE = ScreeningStage("EUS", 0.908, 0.94)
ENDPAC_STAGE = ScreeningStage("END-PAC", 0.558, 0.82, capture_fraction=0.40)
REFERENCE_PREVALENCE = 0.000332

BUILTIN_SCENARIOS = {
    "paper_pipeline": Scenario("paper_pipeline", [PREMOD_STAGE, REDMOD_STAGE, EUS_STAGE],
                               100_000, REFERENCE_PREVALENCE),
    "endpac": Scenario("endpac", [ENDPAC_STAGE, EUS_STAGE], 100_000, REFERENCE_PREVALENCE),
    "eus_only": Scenario("eus_only", [EUS_STAGE], 100_000, REFERENCE_PREVALENCE),
}


def load_scenario(name_or_path: str) -> Scenario:
    if name_or_path in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[name_or_path]
    try:
        with open(name_or_path, encoding="utf-8") as fh:
            return Scenario.from_dict(json.load(fh))
    except FileNotFoundError as exc:
        raise ScenarioError(f"unknown scenario {name_or_path!r}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file is not valid JSON: {exc}") from exc


def stage_from_report(report, name: str = "PREMOD") -> ScreeningStage:
    """Package a threshold-table row as a cascade stage."""
    return ScreeningStage(name, float(report.sensitivity), float(report.specificity))


def stage1_from_model(scored, criterion=None, prior_prevalence: float | None = None,
                      name: str = "PREMOD") -> ScreeningStage:
    """First cascade stage from scored patients (anything with ``.prob`` and ``.label``).

    The default criterion thresholds at ``prior_prevalence``.
    """
    if criterion is None:
        if prior_prevalence is None:
            raise ScenarioError("give a criterion or a prior prevalence")
        criterion = PriorPrevalence(prior_prevalence)
    scored = list(scored)
    report = threshold_table([s.prob for s in scored], [s.label for s in scored], [criterion])[0]
    return stage_from_report(report, name)


def dor_from_operating_point(sensitivity: float, specificity: float) -> float:
    """DOR of an operating point, via balanced expected confusion counts."""
    return dor(ConfusionCounts.expected(sensitivity, specificity, 1.0, 1.0))


# ------------------------------------------------------------ rendering


def cascade_text(result: CascadeResult, title: str = "", decimals: int = 1) -> str:
    # counts are expected (fractional) values; format-level rounding is half-to-even on ties
    k = decimals
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'stage':<10}{'tested':>13}{'prevalence':>12}{'positives':>13}{'cases':>9}")
    for r in result.stages:
        lines.append(f"{r.name:<10}{r.population:>13,.{k}f}{r.prevalence:>12.6f}"
                     f"{r.positives:>13,.{k}f}{r.cases_detected:>9.1f}")
    lines.append(f"detected cancers      {result.detected:.1f}")
    lines.append(f"NNS                   {result.nns:,.{k}f}")
    lines.append(f"NNS ({result.stages[-1].name}, unenriched) {result.nns_base:,.{k}f}")
    lines.append(f"efficiency            {result.efficiency:.1f}x")
    lines.append(f"PPV                   {100 * result.ppv:.1f}%")
    return "\n".join(lines) + "\n"
