"""Figure rendering for CLI reports (PNG, Agg backend, no timestamps)."""

from __future__ import annotations

try:
    import matplotlib
except ImportError as exc:  # figures are optional
    raise ImportError("--figures needs matplotlib: pip install 'artifact[figures]'") from exc

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import calibration_curve, roc_points  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 4.0),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "legend.frameon": False,
}
COLORS = {"case": "#c0392b", "control": "#2e6da4"}


def _save(fig, path):
    # stripping Software keeps PNG bytes stable across matplotlib builds
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def roc_figure(scores, labels, path, title: str = ""):
    th, tp, fp, n1, n0 = roc_points(scores, labels)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(np.r_[0.0, fp / n0], np.r_[0.0, tp / n1], color="k", lw=1.5)
        ax.plot([0, 1], [0, 1], ls=":", color="0.5")
        ax.set_xlabel("1 - specificity")
        ax.set_ylabel("sensitivity")
        ax.set_title(title)
        fig.tight_layout()
    return _save(fig, path)


def calibration_figure(curves: dict, path, title: str = ""):
    """``curves`` maps a legend label to (scores, labels)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, (s, y) in curves.items():
            c = calibration_curve(s, y)
            ax.plot(c.mean_pred, c.mean_obs, marker="o", ms=3, label=name)
        ax.plot([0, 1], [0, 1], ls=":", color="0.5")
        ax.set_xlabel("mean predicted probability")
        ax.set_ylabel("observed fraction")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
    return _save(fig, path)


def trajectory_figure(curves: dict, path, title: str = ""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name in sorted(curves):
            c = curves[name]
            color = COLORS.get(name)
            ax.plot(c.months_before_index, c.center, color=color, label=name)
            ax.fill_between(c.months_before_index, c.q1, c.q3, color=color, alpha=0.2, lw=0)
        ax.invert_xaxis()
        ax.set_xlabel("months before index date")
        ax.set_ylabel("predicted risk")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
    return _save(fig, path)


def attribution_figure(ranked, time_curve, path, title: str = ""):
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9.0, 4.0))
        names = [n for n, _ in ranked][::-1]
        a1.barh(names, [v for _, v in ranked][::-1], color="0.3")
        a1.set_xlabel("mean |phi|")
        a2.plot(np.arange(len(time_curve)), time_curve, color="k")
        a2.invert_xaxis()
        a2.set_xlabel("bucket (0 = most recent)")
        a2.set_ylabel("mean |phi|")
        fig.suptitle(title)
        fig.tight_layout()
    return _save(fig, path)


def cascade_figure(result, path, title: str = ""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [r.name for r in result.stages]
        ax.bar(names, [r.population for r in result.stages], color="0.75", label="tested")
        ax.bar(names, [r.positives for r in result.stages], color="0.35", label="positive")
        ax.set_yscale("log")
        ax.set_ylabel("individuals")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
    return _save(fig, path)
