"""Report figures rendered to PNG files (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "lidkit",
}

# fixed metadata keeps reruns byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


def plot_llr_histogram(tar: np.ndarray, non: np.ndarray, path, title: str = "", threshold: float = 0.0) -> None:
    """Target and non-target detection LLR densities with the decision threshold."""
    tar = np.asarray(tar, dtype=np.float64)
    non = np.asarray(non, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        lo = float(min(tar.min(), non.min()))
        hi = float(max(tar.max(), non.max()))
        if hi <= lo:
            hi = lo + 1.0
        bins = np.linspace(lo, hi, 61)
        ax.hist(non, bins=bins, density=True, alpha=0.55, color="tab:red", label=f"non-target ({non.size})")
        ax.hist(tar, bins=bins, density=True, alpha=0.55, color="tab:blue", label=f"target ({tar.size})")
        ax.axvline(threshold, color="k", lw=0.8, ls="--")
        ax.set_xlabel("detection log-likelihood ratio")
        ax.set_ylabel("density")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper left")
        fig.tight_layout()
        _save(fig, path)


def plot_fewshot(sizes, eer_percent, path, per_seed=None) -> None:
    """EER versus enrollment utterances per language, both axes logarithmic.

    Zero EER cannot sit on a log axis, so the y axis is linear below 0.01%.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    eer_percent = np.asarray(eer_percent, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if per_seed is not None:
            for row in np.asarray(per_seed, dtype=np.float64):
                ax.plot(sizes, row, color="0.75", lw=0.6)
        ax.plot(sizes, eer_percent, "o-", color="tab:blue", ms=4, label="mean over seeds")
        ax.set_xscale("log")
        ax.set_yscale("symlog", linthresh=1e-2)
        ax.set_ylim(bottom=0.0)
        ax.set_xlabel("enrollment utterances per language")
        ax.set_ylabel("EER (%)")
        ax.legend(loc="upper right")
        fig.tight_layout()
        _save(fig, path)
