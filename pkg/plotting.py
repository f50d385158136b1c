# plotting.py
import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import matplotlib as mpl

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed salt and no date so identical inputs give identical SVG bytes
mpl.rcParams.update({
    "svg.hashsalt": "spce",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
})

STRATUM_TITLES = {
    "00": "U = 00 (no ICE under either arm)",
    "01": "U = 01 (ICE only under treatment)",
    "10": "U = 10 (ICE only under control)",
    "11": "U = 11 (ICE under both arms)",
}


def new(ncols: int, nrows: int = 1, width: float = 3.2, height: float = 2.6):
    fig, axes = plt.subplots(nrows=nrows, ncols=ncols, figsize=(width * ncols, height * nrows),
                             squeeze=False, sharey=True)
    return fig, axes.ravel()


def save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Wrote figure {path}")
    return path


def spce_panels(
    grid: np.ndarray,
    curves: Dict[str, np.ndarray],
    bands: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None,
    truth: Optional[Dict[str, np.ndarray]] = None,
    path=None,
    title: str = "",
) -> Path:
    """One panel per stratum: SPCE curve, shaded 95% band, optional dashed truth."""
    strata = sorted(curves)
    fig, axes = new(len(strata))
    for ax, stratum in zip(axes, strata):
        ax.axhline(0.0, color="0.6", linewidth=0.6)
        if bands and stratum in bands:
            lo, hi = bands[stratum]
            ax.fill_between(grid, lo, hi, color="C0", alpha=0.25, linewidth=0, step="post")
        ax.step(grid, curves[stratum], where="post", color="C0", linewidth=1.2)
        if truth and stratum in truth:
            ax.plot(grid, truth[stratum], color="k", linestyle="--", linewidth=1.0)
        ax.set_title(STRATUM_TITLES.get(stratum, stratum), fontsize=8)
        ax.set_xlabel("time")
    axes[0].set_ylabel("SPCE (survival difference)")
    if title:
        fig.suptitle(title, fontsize=9)
    return save(fig, path)


def sweep_panels(frame, path, parameter: str = "zeta", title: str = "") -> Path:
    """Sensitivity sweep: one panel per stratum, one line per sweep value."""
    strata = sorted(frame["stratum"].unique())
    fig, axes = new(len(strata))
    cmap = plt.get_cmap("viridis")
    if parameter == "zeta":
        keys = sorted(frame["zeta"].unique())
        labels = {k: f"zeta={k:g}" for k in keys}
        select = lambda k: frame["zeta"] == k  # noqa: E731
    else:
        keys = sorted(set(zip(frame["xi0"], frame["xi1"])))
        labels = {k: f"xi=({k[0]:.2f}, {k[1]:.2f})" for k in keys}
        select = lambda k: (frame["xi0"] == k[0]) & (frame["xi1"] == k[1])  # noqa: E731
    for ax, stratum in zip(axes, strata):
        ax.axhline(0.0, color="0.6", linewidth=0.6)
        for j, key in enumerate(keys):
            rows = frame[select(key) & (frame["stratum"] == stratum)]
            if rows.empty:
                continue
            ax.step(rows["t"], rows["estimate"], where="post", linewidth=1.0,
                    color=cmap(j / max(len(keys) - 1, 1)), label=labels[key])
        ax.set_title(STRATUM_TITLES.get(stratum, stratum), fontsize=8)
        ax.set_xlabel("time")
    axes[0].set_ylabel("SPCE")
    axes[-1].legend(loc="best", frameon=False)
    if title:
        fig.suptitle(title, fontsize=9)
    return save(fig, path)


def balance_plot(table, path) -> Path:
    """Love plot: unweighted vs weighted |SMD| per covariate and stratum."""
    strata = sorted(table["stratum"].unique())
    fig, axes = new(len(strata), width=2.8)
    for ax, stratum in zip(axes, strata):
        rows = table[table["stratum"] == stratum]
        y = np.arange(len(rows))
        ax.scatter(np.abs(rows["unweighted"]), y, marker="o", facecolors="none", edgecolors="C3", label="unweighted")
        ax.scatter(np.abs(rows["weighted"]), y, marker="o", color="C0", label="weighted")
        ax.axvline(0.1, color="0.5", linestyle=":", linewidth=0.8)
        ax.set_yticks(y)
        ax.set_yticklabels(rows["covariate"])
        ax.set_title(f"U = {stratum}", fontsize=8)
        ax.set_xlabel("|SMD|")
    axes[-1].legend(loc="best", frameon=False)
    return save(fig, path)


def curves_from_summary(payload: Dict, strata: Optional[Sequence[str]] = None):
    """(grid, curves, bands) from a serialized mixture or weighting summary."""
    grid = np.asarray(payload["grid"])
    curves, bands = {}, {}
    for stratum, value in payload["spce"].items():
        if strata and stratum not in strata:
            continue
        if isinstance(value, dict):
            curves[stratum] = np.asarray(value["mean"])
            bands[stratum] = (np.asarray(value["lower"]), np.asarray(value["upper"]))
        else:
            curves[stratum] = np.asarray(value)
            interval = payload.get("intervals", {}).get(f"spce_{stratum}")
            if interval:
                bands[stratum] = (np.asarray(interval["lower"]), np.asarray(interval["upper"]))
    return grid, curves, bands
