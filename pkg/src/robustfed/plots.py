"""Figure rendering for experiment output directories.

Figures are a convenience companion to the CSVs (which remain the
normative, deterministic output): each renderer re-reads the delimited
files it needs and writes a PNG next to them.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_clutter", "render_influence", "render_logreg"]

plt.rcParams.update({
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows


def render_clutter(outdir: Path) -> str:
    header, rows = _read_csv(Path(outdir) / "results.csv")
    col = {name: i for i, name in enumerate(header)}
    errors = defaultdict(list)
    for row in rows:
        errors[row[col["loss"]]].append(float(row[col["abs_error"]]))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    names = list(errors)
    for i, name in enumerate(names):
        vals = np.asarray(errors[name])
        ax.scatter(np.full(vals.size, i) + np.linspace(-0.15, 0.15, vals.size), vals,
                   s=12, alpha=0.6)
        ax.hlines(vals.mean(), i - 0.25, i + 0.25, color="k", lw=1.5)
    ax.set_xticks(range(len(names)), names, rotation=20)
    ax.set_yscale("log")
    ax.set_ylabel("|posterior mean - inlier location|")
    ax.set_title("Location error under contamination (bar = seed mean)")
    path = Path(outdir) / "fig_clutter.png"
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def render_influence(outdir: Path) -> str:
    outdir = Path(outdir)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for curve_file in sorted(outdir.glob("influence_*.csv")):
        _, rows = _read_csv(curve_file)
        z = [float(r[0]) for r in rows]
        fr = [float(r[1]) for r in rows]
        ax.plot(z, fr, marker=".", label=curve_file.stem.removeprefix("influence_"))
    ax.set_xlabel("outlier position z")
    ax.set_ylabel("Fisher-Rao distance to reference posterior")
    ax.set_title("Influence of a single outlier")
    ax.legend(fontsize=8)
    path = outdir / "fig_influence.png"
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def render_logreg(outdir: Path) -> str:
    outdir = Path(outdir)
    header, rows = _read_csv(outdir / "boundary_grid.csv")
    grid = np.asarray([[float(v) for v in row] for row in rows])
    n_side = int(round(np.sqrt(grid.shape[0])))
    gx = grid[:, 0].reshape(n_side, n_side)
    gy = grid[:, 1].reshape(n_side, n_side)
    _, drows = _read_csv(outdir / "boundary_data.csv")
    data = np.asarray([[float(v) for v in row] for row in drows])
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4), sharex=True, sharey=True)
    titles = ["clean-data fit (target)", "contaminated, plain nll", "contaminated, robust"]
    for ax, col, title in zip(axes, (2, 3, 4), titles):
        p = grid[:, col].reshape(n_side, n_side)
        ax.contour(gx, gy, p, levels=[0.2, 0.5, 0.8], colors=["C0", "k", "C3"],
                   linewidths=[1, 1.8, 1])
        inl = data[data[:, 3] == 0]
        out = data[data[:, 3] == 1]
        ax.scatter(inl[:, 0], inl[:, 1], c=np.where(inl[:, 2] == 1, "C3", "C0"), s=8, alpha=0.6)
        ax.scatter(out[:, 0], out[:, 1], marker="x", c="k", s=18)
        ax.set_title(title, fontsize=8)
    path = outdir / "fig_logreg.png"
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)
