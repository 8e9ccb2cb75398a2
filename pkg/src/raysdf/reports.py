"""CSV/JSON report writers and matplotlib figures for run artifacts."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def write_csv(rows: list, path, fieldnames=None) -> None:
    """Write a list of dicts as CSV; column order follows ``fieldnames``
    or the first row's keys."""
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    fieldnames = fieldnames or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def loss_curve_figure(losses, path, title: str = "training loss",
                      smooth: int = 101) -> None:
    """Log-scale loss curve with a running-median overlay."""
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(losses, lw=0.4, alpha=0.4, label="per step")
    if len(losses) > smooth:
        k = smooth
        med = np.array(
            [np.median(losses[max(0, i - k) : i + 1]) for i in range(len(losses))]
        )
        ax.plot(med, lw=1.5, label=f"median ({k})")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def error_histogram_figure(errors, path, threshold=None,
                           title: str = "", xlabel: str = "error") -> None:
    errors = np.asarray(errors, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    if errors.size:
        ax.hist(errors, bins=min(40, max(5, errors.size // 3)), color="#4878b0")
    if threshold is not None:
        ax.axvline(threshold, color="crimson", ls="--", label=f"threshold {threshold:g}")
        ax.legend()
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def grouped_bar_figure(groups: dict, path, title: str = "",
                       ylabel: str = "") -> None:
    """Bar chart of scalar values keyed by group label (e.g. n_views)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = list(groups.keys())
    values = [groups[k] for k in labels]
    ax.bar(range(len(labels)), values, color="#4878b0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels([str(k) for k in labels])
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
