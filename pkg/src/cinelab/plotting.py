"""Matplotlib defaults for report figures, rendered off-screen to files."""
from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIG_WIDTH = 4.5  # inches

RC = {
    "figure.figsize": (FIG_WIDTH, FIG_WIDTH),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    # stable bytes across runs
    "svg.hashsalt": "cinelab",
    "path.simplify": False,
}


@contextmanager
def figure(path, **subplot_kw):
    """Yield (fig, ax) under the report style; save to ``path`` and close on exit."""
    with matplotlib.rc_context(RC):
        fig, ax = plt.subplots(**subplot_kw)
        try:
            yield fig, ax
            fig.tight_layout()
            fig.savefig(Path(path), metadata={"Software": None})
        finally:
            plt.close(fig)


def roc_figure(curves, path, title: str = "Held-out ROC per fold") -> Path:
    """Plot ``curves`` = [(label, fpr, tpr), ...] with the chance diagonal."""
    with figure(path) as (fig, ax):
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--", label="chance")
        for label, fpr, tpr in curves:
            ax.plot(fpr, tpr, label=label)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_aspect("equal")
        ax.set_xlabel("1 - specificity")
        ax.set_ylabel("sensitivity")
        ax.set_title(title)
        ax.legend(loc="lower right")
    return Path(path)
