import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from premod.cli import build_parser, main
from premod.metrics import auroc
from premod.train import read_scores

SYNTH = {"sites": [{"name": "Rochester", "n_cases": 20, "n_controls": 200},
                   {"name": "SiteB", "n_cases": 10, "n_controls": 100, "code_rate_scale": 1.25, "lab_shift": 0.3},
                   {"name": "SiteC", "n_cases": 10, "n_controls": 100, "code_rate_scale": 0.8, "lab_shift": -0.3}],
         "max_history_years": 10.0}
QUICK = {"encoder": {"T": 24}, "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "n_agg_heads": 1},
         "hyper": {"max_epochs": 2}, "loso": {"n_folds": 2}}


def run(*argv):
    return main([str(a) for a in argv])


def tree(d: Path) -> dict:
    """Relative path -> bytes, manifests excluded."""
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def _pipeline(root: Path):
    (root / "synth.json").write_text(json.dumps(SYNTH))
    (root / "quick.json").write_text(json.dumps(QUICK))
    data, models, ev = root / "data", root / "models", root / "eval"
    assert run("synth", "--config", root / "synth.json", "--seed", 0, "--out", data) == 0
    assert run("cohort", "--data", data) == 0
    assert run("train", "--data", data, "--config", root / "quick.json", "--site-holdout", "SiteC",
               "--out", models) == 0
    assert run("eval", "--data", data, "--config", root / "quick.json", "--site-holdout", "SiteC",
               "--lead-years", 1, "--models", models, "--out", ev) == 0
    return data, models, ev


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return (root, *_pipeline(root))


def test_help_lists_flags(capsys):
    parser = build_parser()
    for cmd in ("synth", "cohort", "encode", "train", "eval", "thresholds", "recal", "trajectory",
                "explain", "screen"):
        with pytest.raises(SystemExit) as exc:
            parser.parse_args([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--seed" in out and "--config" in out and "--figures" in out
    parser.parse_args(["eval", "--data", "d", "--out", "o", "--lead-years", "1", "--site-holdout", "SiteC"])


def test_usage_error_exits_2():
    res = subprocess.run([sys.executable, "-m", "premod", "screen", "--no-such-flag"], capture_output=True,
                         text=True)
    assert res.returncode == 2 and "usage" in res.stderr
    res = subprocess.run([sys.executable, "-m", "premod", "recal", "--scores", "x", "--pi-tar", "1",
                          "--target-prevalence", "0.1"], capture_output=True, text=True)
    assert res.returncode == 2


def test_data_error_exits_1(tmp_path, capsys):
    assert run("cohort", "--data", tmp_path) == 1
    assert "error: FileNotFoundError" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{")
    assert run("synth", "--config", tmp_path / "bad.json", "--out", tmp_path / "o") == 1
    assert "ConfigError" in capsys.readouterr().err
    assert run("screen", "--scenario", "nope") == 1
    assert "ScenarioError" in capsys.readouterr().err


def test_screen_table(capsys):
    assert run("screen", "--scenario", "paper_pipeline") == 0
    out = capsys.readouterr().out
    for token in ("44,816.8", "8,532.3", "21.0", "406.8", "8.2x", "3.9%"):
        assert token in out
    assert run("screen", "--scenario", "paper_pipeline", "--decimals", 0) == 0
    out = capsys.readouterr().out
    assert "44,817" in out and "NNS                   407" in out


def test_eval_outputs(pipeline):
    _, _, _, ev = pipeline
    scores = read_scores(ev / "scores_SiteC_1y.csv")
    assert {s.site for s in scores} == {"SiteC"} and {s.fold for s in scores} == {0, 1}
    report = (ev / "report.csv").read_text().splitlines()
    assert report[0].startswith("site,lead_years") and report[1].startswith("SiteC,1")
    manifest = json.loads((ev / "manifest.json").read_text())
    assert manifest["command"] == "eval" and manifest["config"]["sha256"]
    assert all(len(h) == 64 for h in manifest["inputs"].values())


def test_recal_keeps_auroc(pipeline, capsys):
    _, _, _, ev = pipeline
    src = ev / "scores_SiteC_1y.csv"
    assert run("recal", "--scores", src, "--target-prevalence", 0.000332, "--out", ev / "r.csv") == 0
    lines = capsys.readouterr().out.splitlines()
    a = [ln.split()[1] for ln in lines if ln.startswith(("uncalibrated", "recalibrated"))]
    assert len(a) == 2 and a[0] == a[1]
    before, after = read_scores(src), read_scores(ev / "r.csv")
    y = [s.label for s in before]
    for fold in (0, 1):
        b = [s.prob for s in before if s.fold == fold]
        c = [s.prob for s in after if s.fold == fold]
        yy = [s.label for s in before if s.fold == fold]
        assert abs(auroc(b, yy) - auroc(c, yy)) <= 1e-12
    assert np.mean([s.prob for s in after]) < np.mean([s.prob for s in before])
    assert len(y) == len(after)


def test_thresholds(pipeline, capsys):
    _, _, _, ev = pipeline
    assert run("thresholds", "--scores", ev / "scores_SiteC_1y.csv", "--prior-prevalence", 0.033,
               "--out", ev / "th.csv") == 0
    text = capsys.readouterr().out
    assert "Max Youden's J" in text and "prior prevalence" in text
    assert (ev / "th.csv").read_text().startswith("criterion,")


def test_encode(pipeline):
    root, data, _, _ = pipeline
    assert run("encode", "--data", data, "--config", root / "quick.json", "--lead-years", 1,
               "--out", root / "enc" / "m.bin", "--csv") == 0
    from premod.encoding import load_matrices
    mats, header = load_matrices((root / "enc" / "m.bin").read_bytes())
    assert header["T"] == 24 and all(m.lead_years == 1 for m in mats)
    assert not any(m.values[:13].any() for m in mats)


def test_trajectory_explain_figures(pipeline):
    root, data, models, _ = pipeline
    assert run("trajectory", "--data", data, "--models", models, "--max-patients", 20, "--max-months", 12,
               "--n-models", 1, "--figures", "--out", root / "traj") == 0
    curves = (root / "traj" / "curves.csv").read_text().splitlines()
    assert curves[0] == "group,months_before_index,median,q1,q3"
    assert list((root / "traj").glob("*.png"))
    assert run("explain", "--data", data, "--models", models, "--n-patients", 2, "--n-permutations", 2,
               "--max-cells", 8, "--figures", "--out", root / "expl") == 0
    assert (root / "expl" / "attributions.csv").read_text().startswith("patient_id,bucket,feature,phi")
    assert list((root / "expl").glob("*.png"))


def test_figures_are_opt_in(pipeline):
    root, _, _, ev = pipeline
    assert not list(ev.glob("*.png"))


def test_idempotent(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    _pipeline(a)
    _pipeline(b)
    for name in ("data", "models", "eval"):
        ta, tb = tree(a / name), tree(b / name)
        assert ta and ta == tb, name
        ma = (a / name / "manifest.json").read_text().replace(str(a), "ROOT")
        mb = (b / name / "manifest.json").read_text().replace(str(b), "ROOT")
        assert ma == mb, name
    assert json.loads(ma)["started"] == "1970-01-01T00:00:00Z"
