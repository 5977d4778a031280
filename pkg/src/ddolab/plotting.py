"""Optional PNG rendering of the plot-data CSVs (matplotlib, headless)."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _read(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_density_panels(plot_dir, names: list[str], out_path=None) -> Path:
    """One row of density heatmaps with the sample scatter overlaid."""
    plt = _pyplot()
    plot_dir = Path(plot_dir)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.2), squeeze=False)
    for ax, name in zip(axes[0], names):
        _, d = _read(plot_dir / f"density_{name}.csv")
        xs, ys = np.unique(d[:, 0]), np.unique(d[:, 1])
        grid = d[:, 2].reshape(len(xs), len(ys))
        ax.pcolormesh(xs, ys, grid.T, shading="nearest", cmap="magma")
        sample_path = plot_dir / f"samples_{name}.csv"
        if sample_path.exists():
            _, s = _read(sample_path)
            ax.scatter(s[:500, 0], s[:500, 1], s=1.5, c="cyan", alpha=0.4, linewidths=0)
        ax.set_title(name)
        ax.set_xlim(xs[0], xs[-1])
        ax.set_ylim(ys[0], ys[-1])
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    out_path = Path(out_path or plot_dir / "densities.png")
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_pmf(plot_dir, out_path=None) -> Path:
    """Grouped bars of the data pmf against each model's pmf."""
    plt = _pyplot()
    plot_dir = Path(plot_dir)
    header, d = _read(plot_dir / "pmf.csv")
    n, k = d.shape[0], len(header) - 1
    fig, ax = plt.subplots(figsize=(max(4.0, 0.12 * n * k), 3.0))
    width = 0.8 / k
    for j, name in enumerate(header[1:]):
        ax.bar(d[:, 0] + (j - (k - 1) / 2) * width, d[:, j + 1], width, label=name)
    ax.set_xlabel("state")
    ax.set_ylabel("probability")
    ax.legend(frameon=False)
    fig.tight_layout()
    out_path = Path(out_path or plot_dir / "pmf.png")
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_sweep(rows: list[dict], metrics_by_round: dict[int, list[dict]], out_path) -> Path:
    """Eval metric against step for every grid point, one panel per round."""
    plt = _pyplot()
    rounds = sorted(metrics_by_round)
    fig, axes = plt.subplots(1, len(rounds), figsize=(4.0 * len(rounds), 3.0), squeeze=False)
    labels = {(r["round"], r["grid_index"]): f"a={r['alpha']:g} b={r['beta']:g}"
              for r in rows if r["alpha"] is not None}
    for ax, n in zip(axes[0], rounds):
        recs = metrics_by_round[n]
        for gi in sorted({r["grid_index"] for r in recs}):
            pts = [(r["step"], r["metric"]) for r in recs if r["grid_index"] == gi and np.isfinite(r["metric"])]
            if pts:
                s, m = zip(*pts)
                ax.plot(s, m, marker=".", label=labels.get((n, gi), f"grid {gi}"))
        ax.set_title(f"round {n}")
        ax.set_xlabel("step")
        ax.set_yscale("log")
    axes[0][0].set_ylabel("metric")
    axes[0][-1].legend(fontsize=6, frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
