"""Figure rendering for the report paths.

Every multi-point CSV the CLI writes gets a companion PNG next to it.
matplotlib is imported lazily with the Agg backend so headless runs work.
"""

from __future__ import annotations

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _seed_mean(rows, key, mode):
    """Mean metric per axis value over seeds, for one evaluation mode."""
    by_value = {}
    for row in rows:
        if row["mode"] != mode:
            continue
        by_value.setdefault(row["value"], []).append(row[key])
    values = sorted(by_value)
    return values, [float(np.mean(by_value[v])) for v in values]


def render_sweep(rows, axis: str, path) -> None:
    """Seed-averaged metric curves against the sweep axis."""
    plt = _plt()
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    modes = sorted({row["mode"] for row in rows})
    for ax, key, title in zip(axes, ["recall@1", "f1", "nmi"], ["Recall@1", "F1", "NMI"]):
        for mode in modes:
            xs, ys = _seed_mean(rows, key, mode)
            if xs:
                ax.plot(xs, ys, marker="o", label=mode)
        ax.set_xlabel(axis)
        ax.set_ylabel(title)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.suptitle(f"sweep over {axis} (seed averages)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_ablation(rows, path) -> None:
    """Grouped bars: clean vs attacked Recall@1 per ablation variant."""
    plt = _plt()
    variants = []
    for row in rows:
        if row["variant"] not in variants:
            variants.append(row["variant"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.35
    xs = np.arange(len(variants))
    for offset, mode in ((-width / 2, "clean"), (width / 2, "attacked")):
        means = []
        for variant in variants:
            vals = [r["recall@1"] for r in rows if r["variant"] == variant and r["mode"] == mode]
            means.append(float(np.mean(vals)) if vals else 0.0)
        ax.bar(xs + offset, means, width, label=mode)
    ax.set_xticks(xs)
    ax.set_xticklabels(variants, rotation=15)
    ax.set_ylabel("Recall@1")
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_eval(reports: dict, path) -> None:
    """Bar chart of the metrics in one or two evaluation reports."""
    plt = _plt()
    first = next(iter(reports.values()))
    keys = ["nmi", "f1"] + [f"recall@{k}" for k in sorted(first["recall_at"], key=int)]
    fig, ax = plt.subplots(figsize=(1.2 * len(keys) + 2, 3.5))
    width = 0.8 / len(reports)
    xs = np.arange(len(keys))
    for j, (mode, doc) in enumerate(sorted(reports.items())):
        vals = [doc["nmi"], doc["f1"]] + [doc["recall_at"][k] for k in sorted(doc["recall_at"], key=int)]
        ax.bar(xs + j * width, vals, width, label=mode)
    ax.set_xticks(xs + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(keys, rotation=20)
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
