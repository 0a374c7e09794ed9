"""Figures written next to the CLI's CSV/JSON outputs.

Uses the object-oriented matplotlib API so nothing depends on a GUI backend.
"""

import numpy as np
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


def _figure(width=6.4, height=3.2, **kwargs):
    import matplotlib as mpl

    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(width, height), layout="constrained")
        axes = fig.subplots(**kwargs)
    return fig, axes


def _save(fig, path):
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, dpi=120, metadata={"Software": None})


def plot_trace(trace, path):
    """Objective per outer iteration (left) and its four terms (right)."""
    its = [r.iteration for r in trace.records]
    fig, (ax_psi, ax_terms) = _figure(ncols=2)
    ax_psi.plot(its, trace.psi, marker="o", ms=3, color="k")
    ax_psi.set_xlabel("outer iteration")
    ax_psi.set_ylabel("objective")
    if np.all(trace.psi > 0):
        ax_psi.set_yscale("log")
    names = ("classification", "ridge", "quantization", "penalty")
    for i, name in enumerate(names):
        vals = np.array([r.terms[i] for r in trace.records])
        if np.any(vals > 0):
            ax_terms.plot(its, np.where(vals > 0, vals, np.nan), label=name)
    ax_terms.set_yscale("log")
    ax_terms.set_xlabel("outer iteration")
    ax_terms.legend(frameon=False)
    _save(fig, path)


def plot_grid(grid_result, path):
    """Validation MAP over the (gamma, mu) grid as a heatmap."""
    gammas = sorted({g for g, _, _ in grid_result.entries})
    mus = sorted({m for _, m, _ in grid_result.entries})
    table = np.full((len(gammas), len(mus)), np.nan)
    for g, m, v in grid_result.entries:
        i, j = gammas.index(g), mus.index(m)
        if np.isnan(table[i, j]):
            table[i, j] = v
    fig, ax = _figure(width=4.0, height=3.2)
    im = ax.imshow(table, origin="lower", cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(mus)), [f"{m:g}" for m in mus])
    ax.set_yticks(range(len(gammas)), [f"{g:g}" for g in gammas])
    ax.set_xlabel("mu")
    ax.set_ylabel("gamma")
    for i in range(len(gammas)):
        for j in range(len(mus)):
            if not np.isnan(table[i, j]):
                ax.text(j, i, f"{table[i, j]:.3f}", ha="center", va="center",
                        color="w", fontsize=7)
    fig.colorbar(im, ax=ax, label="validation MAP")
    _save(fig, path)


def plot_ap_histogram(report, path):
    fig, ax = _figure(width=4.0, height=3.0)
    ax.hist(report.per_query_ap, bins=20, range=(0, 1), color="0.4")
    ax.axvline(report.map, color="r", lw=1, label=f"MAP {report.map:.3f}")
    ax.set_xlabel(f"AP@{report.r_cutoff}")
    ax.set_ylabel("queries")
    ax.legend(frameon=False)
    _save(fig, path)
