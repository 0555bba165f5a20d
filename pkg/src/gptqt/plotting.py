"""Figures rendered next to CSV reports (PNG, headless backend)."""

from __future__ import annotations

import os
from collections import defaultdict

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update(
        {
            "font.size": 9,
            "axes.labelsize": 9,
            "legend.fontsize": 8,
            "xtick.labelsize": 8,
            "ytick.labelsize": 8,
            "axes.spines.top": False,
            "axes.spines.right": False,
        }
    )
    return plt


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    import matplotlib.pyplot as plt

    plt.close(fig)
    return os.fspath(path)


def method_bars(rows, path, metric: str = "out_rel_err"):
    """Mean of ``metric`` per method with min/max whiskers across layers."""
    plt = _pyplot()
    by = defaultdict(list)
    for r in rows:
        by[r["method"]].append(r[metric])
    names = list(by)
    vals = [np.asarray(by[k], float) for k in names]
    means = np.array([v.mean() for v in vals])
    err = np.array([[m - v.min() for m, v in zip(means, vals)], [v.max() - m for m, v in zip(means, vals)]])
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.bar(range(len(names)), means, yerr=err, color="0.55", edgecolor="k", capsize=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel(metric)
    return _save(fig, path)


def sweep_lines(rows, path, key: str, metric: str = "out_rel_err"):
    """``metric`` against a swept parameter, one line per method."""
    plt = _pyplot()
    series = defaultdict(lambda: defaultdict(list))
    for r in rows:
        series[r["method"]][r[key]].append(r[metric])
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for method, pts in series.items():
        xs = sorted(pts)
        ax.plot(xs, [np.mean(pts[x]) for x in xs], marker="o", label=method)
    ax.set_xlabel(key)
    ax.set_ylabel(metric)
    ax.set_xticks(sorted({r[key] for r in rows}))
    ax.legend(frameon=False)
    return _save(fig, path)


def bench_bars(rows, path):
    """Median matvec time per path, grouped by matrix size (log scale)."""
    plt = _pyplot()
    sizes = sorted({(r["rows"], r["cols"]) for r in rows})
    paths = list(dict.fromkeys(r["path"] for r in rows))
    t = {(r["rows"], r["cols"], r["path"]): r["median_s"] for r in rows}
    width = 0.8 / max(1, len(paths))
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for j, p in enumerate(paths):
        xs = np.arange(len(sizes)) + j * width
        ax.bar(xs, [t[(s[0], s[1], p)] * 1e3 for s in sizes], width, label=p)
    ax.set_xticks(np.arange(len(sizes)) + width * (len(paths) - 1) / 2)
    ax.set_xticklabels([f"{r}x{c}" for r, c in sizes])
    ax.set_yscale("log")
    ax.set_ylabel("median matvec time [ms]")
    ax.legend(frameon=False)
    return _save(fig, path)
