"""Training and leave-one-site-out evaluation.

Each LOSO iteration holds one site out entirely, splits the remaining
(development) patients into folds, trains one model per fold (the fold
itself is the early-stopping validation set), and scores every held-out
patient with every fold model on lead-time-excluded matrices.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import Adam, PlateauSchedule, TrainHyper
from .encoding import EncoderConfig, encode, exclude_lead_time, fit_lab_standardization
from .metrics import auroc
from .model import ModelConfig, forward, forward_graph, init_params
from .synth import child_seed

log = logging.getLogger(__name__)

ANCHOR_SITE = "Rochester"


class Diverged(RuntimeError):
    pass


@dataclass
class ScoredPatient:
    patient_id: str
    site: str
    fold: int
    label: int
    logit: float
    prob: float


def downsample(items, labels, ratio: int | None, seed: int):
    """Keep every case and at most ``ratio`` controls per case (None keeps everything).

    Returns the selected indices in their original order.
    """
    labels = np.asarray(labels)
    idx = np.arange(len(labels))
    if ratio is None:
        return idx
    cases = idx[labels == 1]
    controls = idx[labels == 0]
    target = ratio * len(cases)
    if target >= len(controls):
        return idx
    rng = np.random.default_rng(seed)
    keep = rng.choice(controls, size=target, replace=False)
    return np.sort(np.concatenate([cases, keep]))


# ---------------------------------------------------------------- splits


@dataclass
class SplitPlan:
    held_out_site: str
    dev_sites: list[str]
    dev_ids: list[str]
    test_ids: list[str]
    folds: list[list[str]]
    seed: int

    def fold_of(self) -> dict[str, int]:
        return {pid: k for k, fold in enumerate(self.folds) for pid in fold}


def make_split_plan(patients, held_out_site: str, n_folds: int = 10, seed: int = 0,
                    anchor_site: str = ANCHOR_SITE) -> SplitPlan:
    """Stratified fold assignment of all non-held-out patients."""
    if held_out_site == anchor_site:
        raise ValueError(f"{anchor_site} data is always part of development")
    sites = sorted({p.patient.site for p in patients})
    if held_out_site not in sites:
        raise ValueError(f"unknown site {held_out_site!r}; have {sites}")
    if len(sites) < 2:
        raise ValueError("LOSO needs at least two sites")
    dev = sorted((p for p in patients if p.patient.site != held_out_site), key=lambda p: p.patient_id)
    test = sorted(p.patient_id for p in patients if p.patient.site == held_out_site)
    rng = np.random.default_rng(child_seed(seed, "folds", held_out_site))
    folds = [[] for _ in range(n_folds)]
    for label in (1, 0):
        members = [p.patient_id for p in dev if p.y == label]
        members = [members[i] for i in rng.permutation(len(members))]
        for i, pid in enumerate(members):
            folds[i % n_folds].append(pid)
    folds = [sorted(f) for f in folds]
    return SplitPlan(held_out_site, [s for s in sites if s != held_out_site],
                     [p.patient_id for p in dev], test, folds, seed)


# --------------------------------------------------------------- training


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auroc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    pi_src: float = math.nan


def _loss(p, y, hyper: TrainHyper):
    if hyper.loss == "focal":
        return ad.focal_loss(p, y, hyper.gamma, hyper.alpha)
    return ad.bce_loss(p, y)


def _eval_loss(X, y, params, cfg, hyper):
    out = forward(X, params, cfg)
    with ad.no_grad():
        return float(_loss(ad.Tensor(out.prob), y, hyper).item()), out.prob


def train_fold(train_X, train_y, val_X, val_y, hyper: TrainHyper, cfg: ModelConfig, seed: int = 0):
    """Mini-batch training with plateau LR decay and early stopping on validation loss.

    Returns (params of the best validation epoch, TrainLog).
    """
    train_y = np.asarray(train_y)
    val_y = np.asarray(val_y)
    rng = np.random.default_rng(seed)
    prior = float(train_y.mean())
    params = init_params(cfg, int(rng.integers(2**31)), prior if 0.0 < prior < 1.0 else None)
    opt = Adam(list(params.values()), lr=hyper.lr0, weight_decay=hyper.weight_decay)
    sched = PlateauSchedule(opt, hyper.plateau_patience, hyper.plateau_factor)
    tlog = TrainLog(pi_src=float(train_y.sum() / max(len(train_y) - train_y.sum(), 1)))
    best, best_state, stale = math.inf, None, 0
    n = len(train_y)
    for epoch in range(hyper.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            opt.zero_grad()
            z, _ = forward_graph(train_X[batch], params, cfg, rng=rng)
            loss = _loss(ad.sigmoid(z), train_y[batch], hyper)
            if not math.isfinite(loss.item()):
                raise Diverged(f"non-finite training loss at epoch {epoch}, batch offset {start}")
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        vloss, vprob = _eval_loss(val_X, val_y, params, cfg, hyper)
        if not math.isfinite(vloss):
            raise Diverged(f"non-finite validation loss at epoch {epoch}")
        tlog.train_loss.append(total / n)
        tlog.val_loss.append(vloss)
        tlog.val_auroc.append(auroc(vprob, val_y) if 0 < val_y.sum() < len(val_y) else math.nan)
        tlog.lr.append(opt.lr)
        if vloss < best:
            best, stale, tlog.best_epoch = vloss, 0, epoch
            best_state = {k: v.data.copy() for k, v in params.items()}
        else:
            stale += 1
        sched.update(vloss)
        if stale >= hyper.early_stop_patience:
            break
    for k, v in params.items():
        v.data = best_state[k]
        v.grad = None
    return params, tlog


# -------------------------------------------------------------- evaluation


def t_interval(values, level: float = 0.95):
    """Mean and two-sided t confidence interval."""
    v = np.asarray(values, dtype=float)
    m = float(v.mean())
    if len(v) < 2:
        return m, m, m
    half = stats.t.ppf(0.5 + level / 2, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v))
    return m, m - half, m + half


@dataclass
class EvalRun:
    site: str
    lead_years: float
    scored: list[list[ScoredPatient]]  # one list per fold model
    model_auroc: list[float]
    pi_src: list[float]

    @property
    def summary(self):
        return t_interval(self.model_auroc)

    def flat(self) -> list[ScoredPatient]:
        return [s for model in self.scored for s in model]


@dataclass
class LosoConfig:
    n_folds: int = 10
    downsample_ratio: int | None = 10
    lead_years: tuple = (1, 2, 3)
    seed: int = 0
    shuffle_labels: bool = False


def _fold_job(args):
    fold, train_X, train_y, val_X, val_y, hyper, cfg, seed = args
    return fold, train_fold(train_X, train_y, val_X, val_y, hyper, cfg, seed)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PREMOD_THREADS", "1")))
    except ValueError:
        return 1


def run_loso_site(patients, held_out_site: str, enc: EncoderConfig, cfg: ModelConfig,
                  hyper: TrainHyper, loso: LosoConfig):
    """One LOSO iteration. Returns ({lead: EvalRun}, [fold params], encoder, plan)."""
    plan = make_split_plan(patients, held_out_site, loso.n_folds, loso.seed)
    by_id = {p.patient_id: p for p in patients}
    dev = [by_id[i] for i in plan.dev_ids]
    test = [by_id[i] for i in plan.test_ids]
    enc = replace(enc, lab_stats=fit_lab_standardization(dev, enc.lab_vocab))

    dev_mats = [encode(p, enc) for p in dev]
    check_training_matrices(dev_mats)
    X = np.stack([m.values for m in dev_mats])
    y = np.array([m.label for m in dev_mats])
    if loso.shuffle_labels:
        y = np.random.default_rng(child_seed(loso.seed, "shuffle", held_out_site)).permutation(y)
    test_raw = [encode(p, enc) for p in test]
    test_sets = {}
    for lead in loso.lead_years:
        mats = [exclude_lead_time(m, lead) for m in test_raw]
        assert all(m.is_lead_excluded for m in mats)
        test_sets[lead] = (mats, np.stack([m.values for m in mats]))

    fold_of = plan.fold_of()
    fold_idx = np.array([fold_of[p.patient_id] for p in dev])
    jobs = []
    for k in range(loso.n_folds):
        tr = np.flatnonzero(fold_idx != k)
        va = np.flatnonzero(fold_idx == k)
        seed = int(child_seed(loso.seed, "train", held_out_site, k).generate_state(1)[0])
        keep = tr[downsample(tr, y[tr], loso.downsample_ratio, seed)]
        jobs.append((k, X[keep], y[keep], X[va], y[va], hyper, cfg, seed))

    threads = min(_threads(), len(jobs))
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            results = dict(pool.map(_fold_job, jobs))
    else:
        results = dict(_fold_job(j) for j in jobs)

    runs = {lead: EvalRun(held_out_site, lead, [], [], []) for lead in loso.lead_years}
    fold_params = []
    for k in range(loso.n_folds):
        params, tlog = results[k]
        fold_params.append((params, tlog))
        for lead, (mats, TX) in test_sets.items():
            out = forward(TX, params, cfg)
            scored = [ScoredPatient(m.patient_id, m.site, k, m.label, float(z), float(p))
                      for m, z, p in zip(mats, out.logit, out.prob)]
            run = runs[lead]
            run.scored.append(scored)
            run.model_auroc.append(auroc(out.prob, [m.label for m in mats]))
            run.pi_src.append(tlog.pi_src)
    return runs, fold_params, enc, plan


def evaluate_loso(patients, enc: EncoderConfig, cfg: ModelConfig, hyper: TrainHyper,
                  loso: LosoConfig, held_out_sites=None):
    """LOSO over every non-anchor site. Returns {(site, lead): EvalRun}."""
    sites = sorted({p.patient.site for p in patients})
    if len(sites) < 2:
        raise ValueError("LOSO needs at least two sites")
    held_out_sites = held_out_sites or [s for s in sites if s != ANCHOR_SITE]
    out = {}
    for site in held_out_sites:
        runs, _, _, _ = run_loso_site(patients, site, enc, cfg, hyper, loso)
        for lead, run in runs.items():
            out[(site, lead)] = run
    return out


def overall_summary(runs: dict, lead, pooling: str = "folds"):
    """Across-site mean and CI: over every site x fold AUROC, or over site means."""
    selected = [r for (s, ld), r in runs.items() if ld == lead]
    if pooling == "folds":
        values = [a for r in selected for a in r.model_auroc]
    elif pooling == "sites":
        values = [float(np.mean(r.model_auroc)) for r in selected]
    else:
        raise ValueError(pooling)
    return t_interval(values)


# ------------------------------------------------------------------ IO


SCORE_FIELDS = ["patient_id", "site", "fold", "label", "logit", "prob"]


def scores_csv(scored) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_FIELDS)
    for s in scored:
        w.writerow([s.patient_id, s.site, s.fold, s.label, repr(s.logit), repr(s.prob)])
    return buf.getvalue()


def read_scores(path) -> list[ScoredPatient]:
    with open(path, encoding="utf-8") as fh:
        return [ScoredPatient(r["patient_id"], r["site"], int(r["fold"]), int(r["label"]),
                              float(r["logit"]), float(r["prob"]))
                for r in csv.DictReader(fh)]


# ------------------------------------------------------------ grid search


DESK_SPACE = {
    "tau_days": [7, 30, 90],
    "n_layers": [1, 2, 4, 8],
    "n_heads": [4, 8, 16, 32],
    "d_model": [16, 32, 64],
    "n_agg_heads": [1, 2, 3, 4, "cls"],
    "downsample_ratio": [1, 5, 10, 20, None],
    "lr0": [2e-4, 5e-4, 1e-3, 2e-3],
    "batch_size": [16, 32, 64, 128],
    "loss": ["focal", "bce"],
}

DESK_BASE = {"tau_days": 30, "n_layers": 2, "n_heads": 4, "d_model": 32, "n_agg_heads": 2,
             "downsample_ratio": 10, "lr0": 1e-3, "batch_size": 64, "loss": "focal"}

# Desk-scale training: the tiny network and short budget want a larger step
# than the full-size default.
DESK_HYPER = TrainHyper(lr0=1e-3, max_epochs=10)


@dataclass
class GridResult:
    factor: str
    value: object
    settings: dict
    mean_auroc: float
    fold_auroc: list[float]


def _dev_cv_auroc(patients, settings, enc_base: EncoderConfig, horizon_days: int, hyper: TrainHyper,
                  n_folds: int, seed: int, dropout: float):
    tau = settings["tau_days"]
    T = max(1, horizon_days // tau)
    enc = replace(enc_base, tau_days=tau, T=T,
                  lab_stats=fit_lab_standardization(patients, enc_base.lab_vocab))
    mats = [encode(p, enc) for p in patients]
    X = np.stack([m.values for m in mats])
    y = np.array([m.label for m in mats])
    d = settings["d_model"]
    heads = settings["n_heads"] if d % settings["n_heads"] == 0 else math.gcd(d, settings["n_heads"])
    g = settings["n_agg_heads"]
    cfg = ModelConfig(T=T, D=enc.D, d_model=d, n_layers=settings["n_layers"], n_heads=heads,
                      n_agg_heads=1 if g == "cls" else g,
                      pooling="cls" if g == "cls" else "attention", dropout=dropout)
    h = replace(hyper, lr0=settings["lr0"], batch_size=settings["batch_size"], loss=settings["loss"])
    rng = np.random.default_rng(child_seed(seed, "grid-folds"))
    fold = np.empty(len(y), dtype=int)
    for label in (0, 1):
        members = np.flatnonzero(y == label)
        fold[rng.permutation(members)] = np.arange(len(members)) % n_folds
    scores = []
    for k in range(n_folds):
        tr, va = np.flatnonzero(fold != k), np.flatnonzero(fold == k)
        keep = tr[downsample(tr, y[tr], settings["downsample_ratio"], seed + k)]
        params, _ = train_fold(X[keep], y[keep], X[va], y[va], h, cfg, seed + k)
        scores.append(auroc(forward(X[va], params, cfg).prob, y[va]))
    return float(np.mean(scores)), scores


def grid_search(dev_patients, enc_base: EncoderConfig, hyper: TrainHyper, space=None, base=None,
                horizon_days: int = 48 * 30, n_folds: int = 3, seed: int = 0, dropout: float = 0.1,
                factors=None):
    """One-factor-at-a-time sweep around ``base``; results ranked by mean dev AUROC."""
    space = space or DESK_SPACE
    base = dict(base or DESK_BASE)
    results = []
    mean, folds = _dev_cv_auroc(dev_patients, base, enc_base, horizon_days, hyper, n_folds, seed, dropout)
    results.append(GridResult("base", None, dict(base), mean, folds))
    for factor, values in space.items():
        if factors is not None and factor not in factors:
            continue
        for value in values:
            if value == base[factor]:
                continue
            settings = dict(base, **{factor: value})
            mean, folds = _dev_cv_auroc(dev_patients, settings, enc_base, horizon_days, hyper,
                                        n_folds, seed, dropout)
            results.append(GridResult(factor, value, settings, mean, folds))
    return sorted(results, key=lambda r: -r.mean_auroc)


def check_training_matrices(mats):
    """Training only ever sees raw (non lead-excluded) matrices."""
    bad = [m.patient_id for m in mats if m.is_lead_excluded]
    if bad:
        raise ValueError(f"lead-excluded matrices passed to training: {bad[:3]}")

