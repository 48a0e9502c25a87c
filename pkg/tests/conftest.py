import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from premod import encoding, synth  # noqa: E402
from premod.autodiff import TrainHyper  # noqa: E402
from premod.ehr import load_or_build_cohort  # noqa: E402
from premod.model import ModelConfig, Premod  # noqa: E402
from premod.train import downsample, train_fold  # noqa: E402


@pytest.fixture(scope="session")
def desk_cohort():
    """Default synthetic cohort (3 sites, 2,400 patients), all selected patients."""
    cfg = synth.SynthConfig(seed=0)
    patients = synth.generate(cfg)
    cases, controls, _, _ = load_or_build_cohort(patients)
    return SimpleNamespace(cfg=cfg, patients=patients, labeled=cases + controls)


@pytest.fixture(scope="session")
def quick_model(desk_cohort):
    """One small network trained with SiteC held out; good enough for planted-signal checks."""
    labeled = desk_cohort.labeled
    dev = [p for p in labeled if p.patient.site != "SiteC"]
    test = sorted((p for p in labeled if p.patient.site == "SiteC"), key=lambda p: p.patient_id)
    enc = encoding.EncoderConfig(desk_cohort.cfg.code_vocab, desk_cohort.cfg.lab_vocab, 30, 48)
    enc = replace(enc, lab_stats=encoding.fit_lab_standardization(dev, enc.lab_vocab))
    X = np.stack([encoding.encode(p, enc).values for p in dev])
    y = np.array([p.y for p in dev])
    rng = np.random.default_rng(0)
    is_val = rng.random(len(y)) < 0.15
    tr = np.flatnonzero(~is_val)
    keep = tr[downsample(tr, y[tr], 10, 0)]
    va = np.flatnonzero(is_val)
    cfg = ModelConfig(T=48, D=enc.D, d_model=16, n_layers=1, n_heads=2, n_agg_heads=2, dropout=0.0)
    hyper = TrainHyper(lr0=2e-3, max_epochs=8, dropout=0.0)
    params, log = train_fold(X[keep], y[keep], X[va], y[va], hyper, cfg, seed=0)
    return SimpleNamespace(enc=enc, cfg=cfg, params=params, log=log, model=Premod(cfg, params),
                           dev=dev, test=test, pi_src=log.pi_src)


# ------------------------------------------------------------ acceptance lines

_ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture(scope="session")
def acceptance():
    """``acceptance(n, ok, detail)`` records one check under criterion ``n``."""
    def record(n: int, ok: bool, detail: str):
        _ACCEPTANCE.setdefault(n, []).append((bool(ok), detail))
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        checks = _ACCEPTANCE[n]
        ok = all(c for c, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
