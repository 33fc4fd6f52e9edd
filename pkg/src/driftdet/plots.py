"""Minimal static plotting: curve CSVs and SVG line plots."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def write_curves_csv(series: dict[str, np.ndarray], path: str | Path) -> None:
    """Header (iteration, series...); one row per iteration."""
    path = Path(path)
    keys = [k for k in series if not k.startswith("eval_")]
    if "iteration" in keys:
        keys.remove("iteration")
        keys = ["iteration"] + keys
    n = len(series[keys[0]]) if keys else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for i in range(n):
            writer.writerow([series[k][i] for k in keys])
    if "eval_iteration" in series:
        with open(path.with_name(path.stem + "_eval.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "mean_ap"])
            for it, v in zip(series["eval_iteration"], series["eval_map"]):
                writer.writerow([it, v])


def plot_series(named: dict[str, tuple[np.ndarray, np.ndarray]], title: str,
                ylabel: str, path: str | Path) -> None:
    """One SVG line plot; named maps a legend label to (x, y)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in named.items():
        mask = np.isfinite(np.asarray(y, dtype=float))
        ax.plot(np.asarray(x)[mask], np.asarray(y, dtype=float)[mask], label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if named:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
