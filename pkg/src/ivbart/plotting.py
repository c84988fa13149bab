"""SVG figures: partial-dependence bands and error-correlation histograms.

Output is deterministic: the SVG hash salt is fixed and no creation date is
embedded.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  pylint: disable=wrong-import-position
import pandas as pd  # noqa: E402  pylint: disable=wrong-import-position

_SVG_METADATA = {"Date": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "ivbart", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    return path


def plot_partial_dependence(frame: pd.DataFrame, path, title: str | None = None) -> Path:
    """Posterior mean curve and credible band per covariate profile.

    Arguments:
        frame -- output of ivmodels.partial_dependence
        path -- SVG file to write

    Keyword Arguments:
        title -- axes title (default: {None})

    Returns:
        path written
    """
    fig, ax = plt.subplots(figsize=(6.4, 3.8))
    for profile, group in frame.groupby("profile", sort=False):
        group = group.sort_values("t")
        line, = ax.plot(group["t"], group["mean"], marker="o", label=str(profile))
        ax.fill_between(group["t"], group["lower"], group["upper"], color=line.get_color(), alpha=0.2)
    ax.set_xlabel("exposure t")
    ax.set_ylabel("partial dependence of f2")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_rho_histograms(per_draw: pd.DataFrame, per_observation: pd.DataFrame, path, bins: int = 30) -> Path:
    """Histograms of the per-draw and per-observation mean error correlations."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(8.0, 3.4), sharex=True)
    left.hist(per_draw["rho_mean"], bins=bins, range=(-1.0, 1.0), color="0.4")
    left.set_xlabel("mean rho over observations, per draw")
    right.hist(per_observation["rho_mean"], bins=bins, range=(-1.0, 1.0), color="0.4")
    right.set_xlabel("mean rho over draws, per observation")
    left.set_ylabel("count")
    fig.tight_layout()
    return _save(fig, path)


def plot_trace(per_draw: pd.DataFrame, column: str, path) -> Path:
    """Trace of one scalar per chain."""
    fig, ax = plt.subplots(figsize=(6.4, 3.0))
    for chain, group in per_draw.groupby("chain"):
        ax.plot(group["iteration"], group[column], linewidth=0.8, label=f"chain {chain}")
    ax.set_xlabel("iteration")
    ax.set_ylabel(column)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)
