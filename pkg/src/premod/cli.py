"""Command-line entry point: ``premod <subcommand> ...``.

Every run writes a ``manifest.json`` next to its outputs. Usage errors exit
with status 2, data errors with status 1 and a one-line diagnostic naming the
error type.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import ehr, encoding, metrics, recal, screening, shapley, synth, train, trajectory
from .autodiff import TrainHyper
from .model import ModelConfig, Premod, load_checkpoint, save_checkpoint

log = logging.getLogger("premod")

EVENTS = "events.tsv"
DEMOGRAPHICS = "demographics.tsv"
COHORT = "cohort.tsv"


# ------------------------------------------------------------- manifest


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stamp() -> str:
    # SOURCE_DATE_EPOCH pins timestamps for reproducible manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(out_dir: Path, args, inputs, started: str, outputs):
    cfg = getattr(args, "config", None)
    manifest = {
        "command": args.command,
        "argv": list(getattr(args, "argv", [])),
        "config": {"path": cfg, "sha256": _sha256(cfg)} if cfg else None,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "versions": {"artifact": _version(), "numpy": np.__version__, "python": sys.version.split()[0]},
        "threads": train._threads(),
        "started": started,
        "finished": _stamp(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -------------------------------------------------------------- helpers


def _load_json(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise synth.ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _pick(cls, d: dict, drop=()):
    names = {f.name for f in fields(cls)} - set(drop)
    unknown = set(d) - names
    if unknown:
        raise synth.ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return d


def _read_data(data_dir: Path):
    return ehr.read_events(data_dir / EVENTS, data_dir / DEMOGRAPHICS)


def _read_labeled(args):
    patients = _read_data(args.data)
    cohort = args.cohort or args.data / COHORT
    return ehr.read_cohort(cohort, patients), [args.data / EVENTS, args.data / DEMOGRAPHICS, cohort]


def _prepare_out(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


class RunSettings:
    """Encoder, model, training and LOSO settings from one JSON config."""

    def __init__(self, raw: dict, seed: int):
        for key in raw:
            if key not in ("encoder", "model", "hyper", "loso"):
                raise synth.ConfigError(f"unknown config section {key!r}")
        enc = raw.get("encoder", {})
        self.tau_days = int(enc.get("tau_days", 30))
        self.T = int(enc.get("T", 48))
        self.model = _pick(ModelConfig, dict(raw.get("model", {})), drop=("T", "D"))
        hyper = {**asdict(train.DESK_HYPER), **_pick(TrainHyper, raw.get("hyper", {}))}
        self.hyper = TrainHyper(**hyper)
        loso = dict(raw.get("loso", {}))
        _pick(train.LosoConfig, loso, drop=("seed",))
        if "lead_years" in loso:
            loso["lead_years"] = tuple(loso["lead_years"])
        self.loso = train.LosoConfig(**loso, seed=seed)

    def encoder(self, patients) -> encoding.EncoderConfig:
        codes, labs = encoding.vocab_from_patients(patients)
        return encoding.EncoderConfig(codes, labs, self.tau_days, self.T)

    def model_config(self, D: int) -> ModelConfig:
        return ModelConfig(T=self.T, D=D, **{"dropout": self.hyper.dropout, **self.model})


def _sites(labeled, holdout):
    sites = sorted({lp.patient.site for lp in labeled})
    if holdout:
        return holdout
    return [s for s in sites if s != train.ANCHOR_SITE]


def _train_site(labeled, site, settings: RunSettings, models_dir: Path):
    enc = settings.encoder(labeled)
    cfg = settings.model_config(enc.D)
    loso = replace(settings.loso, lead_years=())
    _, fold_params, enc, plan = train.run_loso_site(labeled, site, enc, cfg, settings.hyper, loso)
    site_dir = _prepare_out(models_dir / site)
    written = [_write(site_dir / "encoder.json", json.dumps(enc.to_dict(), indent=2, sort_keys=True) + "\n")]
    logs = []
    for k, (params, tlog) in enumerate(fold_params):
        extra = {"held_out_site": site, "fold": k, "pi_src": tlog.pi_src, "seed": settings.loso.seed}
        blob = save_checkpoint(params, cfg, enc.fingerprints(), extra)
        path = site_dir / f"fold_{k:02d}.ckpt"
        path.write_bytes(blob)
        written.append(path)
        logs.append({"fold": k, **asdict(tlog)})
    written.append(_write(site_dir / "train_log.json", json.dumps(logs, indent=2, sort_keys=True) + "\n"))
    return written


def _load_models(site_dir: Path, limit: int | None = None):
    """Returns (encoder, [(Premod, extra)]) for one held-out site; ``limit`` keeps the first folds."""
    enc_path = site_dir / "encoder.json"
    if not enc_path.exists():
        raise FileNotFoundError(f"no trained models in {site_dir}")
    enc = encoding.EncoderConfig.from_dict(json.loads(enc_path.read_text(encoding="utf-8")))
    models = []
    for path in sorted(site_dir.glob("fold_*.ckpt"))[:limit]:
        params, cfg, header = load_checkpoint(path.read_bytes(), enc.fingerprints())
        models.append((Premod(cfg, params, header["extra"]), header["extra"]))
    if not models:
        raise FileNotFoundError(f"no checkpoints in {site_dir}")
    return enc, models


def _ensemble(models):
    def f(X):
        return np.mean([m.logits(X) for m, _ in models], axis=0)
    return f


def _recal_spec(args, pi_src):
    if args.pi_tar is not None:
        return recal.RecalSpec(pi_src, args.pi_tar)
    if args.target_prevalence is not None:
        return recal.RecalSpec.from_prevalence(pi_src, args.target_prevalence)
    return None


# ----------------------------------------------------------- subcommands


def cmd_synth(args):
    cfg = synth.SynthConfig.from_json(Path(args.config).read_text(encoding="utf-8")) if args.config \
        else synth.SynthConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _prepare_out(args.out)
    patients = synth.generate(cfg)
    ehr.write_events(patients, out / EVENTS, out / DEMOGRAPHICS)
    written = [out / EVENTS, out / DEMOGRAPHICS, _write(out / "synth_config.json", cfg.to_json() + "\n")]
    print(f"{len(patients)} patients, {sum(len(p.events) for p in patients)} events -> {out}")
    return out, [], written


def cmd_cohort(args):
    raw = _pick(ehr.CohortSpec, _load_json(args.config))
    for key in ("case_code_prefixes", "control_excluded_prefixes", "lab_panel"):
        if raw.get(key) is not None:
            raw[key] = frozenset(ehr.normalize_code(c) if key != "lab_panel" else c for c in raw[key])
    spec = ehr.CohortSpec(**raw)
    patients = _read_data(args.data)
    cases, controls, rc, rk = ehr.load_or_build_cohort(patients, spec)
    if args.match:
        seed = int(synth.child_seed(args.seed or 0, "match").generate_state(1)[0])
        res = ehr.match_controls(cases, controls, spec, seed=seed)
        controls = [lp for lp in res.matched if lp.y == 0]
        print(f"matched {len(controls)} controls, achieved ratio {res.achieved_ratio:.2f}")
    out_file = args.out or args.data / COHORT
    _prepare_out(out_file.parent)
    ehr.write_cohort(cases + controls, out_file)
    for name, rep in (("cases", rc), ("controls", rk)):
        reasons = ", ".join(f"{k}={v}" for k, v in sorted(rep.excluded.items())) or "none"
        print(f"{name}: considered {rep.considered}, included {rep.included}, excluded: {reasons}")
    return out_file.parent, [args.data / EVENTS, args.data / DEMOGRAPHICS], [out_file]


def cmd_encode(args):
    settings = RunSettings(_load_json(args.config), args.seed or 0)
    labeled, inputs = _read_labeled(args)
    enc = settings.encoder(labeled)
    dev = [lp for lp in labeled if lp.patient.site not in (args.site_holdout or [])]
    enc = replace(enc, lab_stats=encoding.fit_lab_standardization(dev, enc.lab_vocab))
    lead = args.lead_years[0] if args.lead_years else None
    mats = encoding.encode_many(labeled, enc, lead if lead else None)
    out = args.out
    _prepare_out(out.parent)
    out.write_bytes(encoding.dump_matrices(mats, enc))
    written = [out]
    if args.csv:
        written.append(_write(out.with_suffix(".csv"), encoding.matrices_csv(mats, enc)))
    print(f"encoded {len(mats)} patients as {enc.T}x{enc.D} matrices -> {out}")
    return out.parent, inputs, written


def cmd_train(args):
    settings = RunSettings(_load_json(args.config), args.seed or 0)
    labeled, inputs = _read_labeled(args)
    out = _prepare_out(args.out)
    written = []
    for site in _sites(labeled, args.site_holdout):
        written += _train_site(labeled, site, settings, out)
        print(f"trained {settings.loso.n_folds} fold models with {site} held out")
    return out, inputs, written


def _nanmean(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


def _metric_row(site, lead, run: train.EvalRun):
    per = [metrics.summarize([s.prob for s in m], [s.label for s in m]) for m in run.scored]
    mean, lo, hi = run.summary
    row = {"site": site, "lead_years": lead, "n_models": len(per),
           "auroc": mean, "auroc_lo": lo, "auroc_hi": hi}
    for key in ("brier", "ece", "cal_slope", "cal_intercept"):
        row[key] = _nanmean([p[key] for p in per])
    return row


def _report(rows) -> tuple[str, str]:
    keys = list(rows[0])
    csv_lines = [",".join(keys)] + [",".join(str(r[k]) for k in keys) for r in rows]
    text = [f"{'site':<10}{'lead':>5}  {'AUROC (95% CI)':<22}{'Brier':>8}{'ECE':>8}{'slope':>8}{'icpt':>8}"]
    for r in rows:
        ci = f"{r['auroc']:.3f} ({r['auroc_lo']:.3f}-{r['auroc_hi']:.3f})"
        text.append(f"{r['site']:<10}{r['lead_years']:>4g}y  {ci:<22}{r['brier']:>8.4f}{r['ece']:>8.4f}"
                    f"{r['cal_slope']:>8.3f}{r['cal_intercept']:>8.3f}")
    return "\n".join(csv_lines) + "\n", "\n".join(text) + "\n"


def cmd_eval(args):
    settings = RunSettings(_load_json(args.config), args.seed or 0)
    labeled, inputs = _read_labeled(args)
    out = _prepare_out(args.out)
    leads = tuple(args.lead_years or settings.loso.lead_years)
    models_dir = args.models
    written = []
    if models_dir is None:
        models_dir = out / "models"
        for site in _sites(labeled, args.site_holdout):
            written += _train_site(labeled, site, settings, models_dir)
    by_id = {lp.patient_id: lp for lp in labeled}
    rows, runs = [], {}
    for site in _sites(labeled, args.site_holdout):
        enc, models = _load_models(models_dir / site)
        test = sorted((lp for lp in labeled if lp.patient.site == site), key=lambda lp: lp.patient_id)
        if not test:
            raise ValueError(f"no cohort patients at site {site}")
        raw = [encoding.encode(by_id[lp.patient_id], enc) for lp in test]
        for lead in leads:
            mats = [encoding.exclude_lead_time(m, lead) for m in raw]
            X = np.stack([m.values for m in mats])
            run = train.EvalRun(site, lead, [], [], [])
            for model, extra in models:
                z = model.logits(X)
                p = model.predict_proba(X)
                run.scored.append([train.ScoredPatient(m.patient_id, m.site, int(extra["fold"]), m.label,
                                                       float(zi), float(pi))
                                   for m, zi, pi in zip(mats, z, p)])
                run.model_auroc.append(metrics.auroc(p, [m.label for m in mats]))
                run.pi_src.append(float(extra["pi_src"]))
            runs[(site, lead)] = run
            rows.append(_metric_row(site, lead, run))
            path = out / f"scores_{site}_{lead:g}y.csv"
            written.append(_write(path, train.scores_csv(run.flat())))
            meta = {"site": site, "lead_years": lead,
                    "pi_src": {str(s[0].fold): ps for s, ps in zip(run.scored, run.pi_src)}}
            written.append(_write(path.with_suffix(".meta.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n"))
    if len({s for s, _ in runs}) > 1:
        for lead in leads:
            mean, lo, hi = train.overall_summary(runs, lead)
            sub = [r for r in rows if r["lead_years"] == lead]
            overall = {"site": "Overall", "lead_years": lead, "n_models": sum(r["n_models"] for r in sub),
                       "auroc": mean, "auroc_lo": lo, "auroc_hi": hi}
            for key in ("brier", "ece", "cal_slope", "cal_intercept"):
                overall[key] = _nanmean([r[key] for r in sub])
            rows.append(overall)
    csv_text, text = _report(rows)
    written.append(_write(out / "report.csv", csv_text))
    written.append(_write(out / "report.txt", text))
    print(text, end="")
    if args.figures:
        from . import plotting
        for (site, lead), run in runs.items():
            flat = run.flat()
            s = [x.prob for x in flat]
            y = [x.label for x in flat]
            written.append(plotting.roc_figure(s, y, out / f"roc_{site}_{lead:g}y.png", f"{site}, {lead:g}-year lead"))
    return out, inputs, written


def _scores_input(path: Path):
    scored = train.read_scores(path)
    if not scored:
        raise ValueError(f"{path} holds no scores")
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return scored, meta


def cmd_thresholds(args):
    scored, _ = _scores_input(args.scores)
    s = np.array([x.prob for x in scored])
    y = np.array([x.label for x in scored])
    reports = metrics.threshold_table(s, y, prior_prevalence=args.prior_prevalence)
    lines = ["criterion,threshold,sensitivity,specificity,ppv,npv,youden_j,dor"]
    text = [f"{'criterion':<40}{'thr':>9}{'sens':>7}{'spec':>7}{'PPV':>7}{'NPV':>7}{'J':>7}{'DOR':>9}"]
    for r in reports:
        lines.append(",".join([r.criterion.label] + [repr(float(v)) for v in
                     (r.threshold, r.sensitivity, r.specificity, r.ppv, r.npv, r.youden_j, r.dor)]))
        text.append(f"{r.criterion.label:<40}{r.threshold:>9.4f}{r.sensitivity:>7.3f}{r.specificity:>7.3f}"
                    f"{r.ppv:>7.3f}{r.npv:>7.3f}{r.youden_j:>7.3f}{r.dor:>9.2f}")
    out = args.out or args.scores.with_name(args.scores.stem + "_thresholds.csv")
    _prepare_out(out.parent)
    _write(out, "\n".join(lines) + "\n")
    print("\n".join(text))
    return out.parent, [args.scores], [out]


def cmd_recal(args):
    scored, meta = _scores_input(args.scores)
    if args.pi_tar is None and args.target_prevalence is None:
        raise recal.OutOfRange("give --pi-tar or --target-prevalence")
    per_fold = {int(k): v for k, v in meta.get("pi_src", {}).items()}
    if args.pi_src is None and not per_fold:
        raise recal.OutOfRange("no --pi-src given and no scores metadata to read it from")
    z = np.array([x.logit for x in scored])
    zc = np.empty_like(z)
    for i, x in enumerate(scored):
        pi_src = args.pi_src if args.pi_src is not None else per_fold[x.fold]
        zc[i] = recal.recalibrate_logit(z[i], _recal_spec(args, pi_src))
    pc = recal._sigmoid(zc)
    out = args.out or args.scores.with_name(args.scores.stem + "_recal.csv")
    _prepare_out(out.parent)
    new = [replace(x, logit=float(a), prob=float(b)) for x, a, b in zip(scored, zc, pc)]
    _write(out, train.scores_csv(new))
    y = np.array([x.label for x in scored])
    p = np.array([x.prob for x in scored])
    written = [out]
    print(f"{'':<14}{'AUROC':>8}{'Brier':>9}{'ECE':>9}")
    for name, probs in (("uncalibrated", p), ("recalibrated", pc)):
        sm = metrics.summarize(probs, y)
        print(f"{name:<14}{sm['auroc']:>8.4f}{sm['brier']:>9.5f}{sm['ece']:>9.5f}")
    if args.figures:
        from . import plotting
        written.append(plotting.calibration_figure({"uncalibrated": (p, y), "recalibrated": (pc, y)},
                                                   out.with_suffix(".png"), "calibration"))
    return out.parent, [args.scores], written


def _model_site(args):
    sites = sorted(p.name for p in args.models.iterdir() if (p / "encoder.json").exists())
    if args.site_holdout:
        site = args.site_holdout[0]
        if site not in sites:
            raise FileNotFoundError(f"no models for held-out site {site} in {args.models}")
        return site
    if not sites:
        raise FileNotFoundError(f"no trained models in {args.models}")
    return sites[0]


def cmd_trajectory(args):
    labeled, inputs = _read_labeled(args)
    site = _model_site(args)
    enc, models = _load_models(args.models / site, args.n_models)
    test = sorted((lp for lp in labeled if lp.patient.site == site), key=lambda lp: (-lp.y, lp.patient_id))
    test = test[: args.max_patients]
    pi_src = float(np.mean([e["pi_src"] for _, e in models]))
    spec = _recal_spec(args, pi_src)
    trajs = trajectory.cohort_trajectories(test, _ensemble(models), enc, max_windows=args.max_months + 1,
                                           recal=spec)
    curves = trajectory.cohort_curves(trajs)
    out = _prepare_out(args.out)
    written = [_write(out / "curves.csv", trajectory.curves_csv(curves)),
               _write(out / "trajectories.csv", trajectory.trajectories_csv(trajs))]
    for name, c in curves.items():
        pick = [m for m in (6, 12, 36, 60) if m in set(c.months_before_index.tolist())]
        vals = ", ".join(f"{m}mo {c.center[list(c.months_before_index).index(m)]:.4f}" for m in pick)
        print(f"{name:<8} median risk: {vals}")
    if args.figures:
        from . import plotting
        written.append(plotting.trajectory_figure(curves, out / "curves.png", f"risk trajectories, {site}"))
    return out, inputs, written


def cmd_explain(args):
    labeled, inputs = _read_labeled(args)
    site = _model_site(args)
    enc, models = _load_models(args.models / site, args.n_models)
    pool = sorted((lp for lp in labeled if lp.patient.site == site and lp.y == 1), key=lambda lp: lp.patient_id)
    pool = pool[: args.n_patients]
    if not pool:
        raise ValueError(f"no case patients at site {site}")
    X = np.stack([encoding.encode(lp, enc).values for lp in pool])
    seed = int(synth.child_seed(args.seed or 0, "explain").generate_state(1)[0])
    S = shapley.attribution_tensor(_ensemble(models), X, [lp.patient_id for lp in pool], enc.feature_names,
                                   args.n_permutations, seed, args.max_cells)
    ranked = shapley.aggregate_feature(S, args.top_k)
    out = _prepare_out(args.out)
    curve = shapley.aggregate_time(S)
    written = [_write(out / "attributions.csv", shapley.attributions_csv(S)),
               _write(out / "ranking.txt", shapley.ranking_text(ranked)),
               _write(out / "time_profile.csv", "bucket,mean_abs_phi\n" +
                      "".join(f"{t},{float(v)!r}\n" for t, v in enumerate(curve)))]
    print(shapley.ranking_text(ranked), end="")
    if args.figures:
        from . import plotting
        written.append(plotting.attribution_figure(ranked, curve, out / "attributions.png", f"attributions, {site}"))
    return out, inputs, written


def cmd_screen(args):
    scen = screening.load_scenario(args.scenario)
    result = scen.run()
    print(screening.cascade_text(result, f"scenario: {scen.name}", args.decimals), end="")
    inputs = [] if args.scenario in screening.BUILTIN_SCENARIOS else [Path(args.scenario)]
    if args.out is None:
        return None, inputs, []
    out = _prepare_out(args.out)
    written = [_write(out / f"cascade_{scen.name}.csv", screening.cascade_csv(result))]
    if args.figures:
        from . import plotting
        written.append(plotting.cascade_figure(result, out / f"cascade_{scen.name}.png", scen.name))
    return out, inputs, written


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed; child seeds are derived by name")
    common.add_argument("--config", default=None, help="JSON configuration file")
    common.add_argument("--figures", action="store_true", help="also render PNG figures next to the outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    def data_args(p, cohort=True):
        p.add_argument("--data", type=Path, required=True, help=f"directory holding {EVENTS} and {DEMOGRAPHICS}")
        if cohort:
            p.add_argument("--cohort", type=Path, default=None, help=f"cohort file (default DATA/{COHORT})")

    def recal_args(p):
        p.add_argument("--pi-src", type=float, default=None, help="source prior odds (default: from metadata)")
        g = p.add_mutually_exclusive_group()
        g.add_argument("--pi-tar", type=float, default=None, help="target prior odds")
        g.add_argument("--target-prevalence", type=float, default=None, help="target prevalence, converted to odds")

    parser = argparse.ArgumentParser(prog="premod", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-site cohort")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cohort", parents=[common], help="select cases and controls")
    data_args(p, cohort=False)
    p.add_argument("--match", action="store_true", help="match controls to cases on sex and age")
    p.add_argument("--out", type=Path, default=None, help=f"cohort file (default DATA/{COHORT})")
    p.set_defaults(func=cmd_cohort)

    p = sub.add_parser("encode", parents=[common], help="encode a cohort into bucket matrices")
    data_args(p)
    p.add_argument("--lead-years", type=float, nargs=1, default=None, help="zero the final N years")
    p.add_argument("--site-holdout", nargs="+", default=None, help="sites left out of lab standardisation")
    p.add_argument("--csv", action="store_true", help="also write a long-format CSV")
    p.add_argument("--out", type=Path, required=True, help="matrix file")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", parents=[common], help="train fold models for held-out sites")
    data_args(p)
    p.add_argument("--site-holdout", nargs="+", default=None, help="held-out sites (default: every non-anchor site)")
    p.add_argument("--out", type=Path, required=True, help="models directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="leave-one-site-out evaluation")
    data_args(p)
    p.add_argument("--site-holdout", nargs="+", default=None, help="held-out sites (default: every non-anchor site)")
    p.add_argument("--lead-years", type=float, nargs="+", default=None, help="lead times to test (default 1 2 3)")
    p.add_argument("--models", type=Path, default=None, help="models directory from `train` (default: train now)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("thresholds", parents=[common], help="operating points of a scores CSV")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--prior-prevalence", type=float, default=None, help="add a threshold at this prevalence")
    p.add_argument("--out", type=Path, default=None, help="CSV output")
    p.set_defaults(func=cmd_thresholds)

    p = sub.add_parser("recal", parents=[common], help="prevalence-aware recalibration of a scores CSV")
    p.add_argument("--scores", type=Path, required=True)
    recal_args(p)
    p.add_argument("--out", type=Path, default=None, help="recalibrated scores CSV")
    p.set_defaults(func=cmd_recal)

    p = sub.add_parser("trajectory", parents=[common], help="sliding-window risk trajectories")
    data_args(p)
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("--site-holdout", nargs=1, default=None, help="which held-out site's models and patients")
    p.add_argument("--max-months", type=int, default=60, help="how far back to slide the window")
    p.add_argument("--max-patients", type=int, default=200, help="cases first, then controls, by id")
    p.add_argument("--n-models", type=int, default=3, help="fold models averaged in logit space")
    recal_args(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("explain", parents=[common], help="Shapley attributions for held-out cases")
    data_args(p)
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("--site-holdout", nargs=1, default=None)
    p.add_argument("--n-patients", type=int, default=5)
    p.add_argument("--n-permutations", type=int, default=16)
    p.add_argument("--max-cells", type=int, default=64, help="players per patient (largest |x| cells)")
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--n-models", type=int, default=1, help="fold models averaged in logit space")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("screen", parents=[common], help="multi-stage screening cascade")
    p.add_argument("--scenario", default="paper_pipeline",
                   help=f"built-in ({', '.join(screening.BUILTIN_SCENARIOS)}) or a JSON file")
    p.add_argument("--decimals", type=int, default=1, help="decimals for counts and NNS in the table")
    p.add_argument("--out", type=Path, default=None, help="output directory for the cascade CSV")
    p.set_defaults(func=cmd_screen)
    return parser


DATA_ERRORS = (ValueError, RuntimeError, OSError, KeyError, ImportError)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _stamp()
    try:
        out_dir, inputs, written = args.func(args)
        if out_dir is not None:
            write_manifest(Path(out_dir), args, inputs, started, written)
    except DATA_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
