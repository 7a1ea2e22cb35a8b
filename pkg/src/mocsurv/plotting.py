"""Figure rendering for reports.  Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import KMCurve  # noqa: E402

GROUP_COLORS = {"high": "#c0392b", "low": "#2471a3"}

RC = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "lines.linewidth": 1.5,
    "svg.hashsalt": "mocsurv",
}


def _step_xy(curve: KMCurve):
    xs, ys = [0.0], [1.0]
    for t, s in zip(curve.times, curve.survival):
        xs.append(float(t))
        ys.append(float(s))
    return xs, ys


def plot_km(curves: dict[str, KMCurve], path, p_value: float | None = None,
            title: str = "Kaplan-Meier by predicted risk", censor_marks: dict | None = None) -> None:
    """Step curves per group; log-rank p annotated when given.

    ``censor_marks`` optionally maps group -> list of censoring times drawn
    as ticks on the curve.
    """
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.6))
        for group, curve in curves.items():
            xs, ys = _step_xy(curve)
            color = GROUP_COLORS.get(group)
            ax.step(xs, ys, where="post", label=f"{group} risk", color=color)
            if censor_marks and censor_marks.get(group):
                ct = censor_marks[group]
                ax.plot(ct, [curve.at(t) for t in ct], "|", color=color, markersize=6)
        ax.set_xlabel("time")
        ax.set_ylabel("survival probability")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(title)
        if p_value is not None:
            ax.text(0.97, 0.95, f"log-rank p = {p_value:.3g}", transform=ax.transAxes,
                    ha="right", va="top")
        ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
        plt.close(fig)


def plot_fold_cindex(values: list[float], path, label: str = "validation C-index") -> None:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.bar([f"fold {i}" for i in range(len(values))], values, color="#7f8c8d")
        ax.axhline(0.5, color="black", linewidth=0.8, linestyle="--")
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel(label)
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
        plt.close(fig)
