"""Report rendering: aligned text tables, tab-separated rows, and figures.

Figures render through the Agg backend straight to files, one PNG next to
each delimited output.
"""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def ensure_outdir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def format_table(headers, rows) -> str:
    cells = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for ri, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if ri == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_tsv(path, headers, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(map(str, headers)) + "\n")
        for row in rows:
            fh.write("\t".join(map(str, row)) + "\n")


def write_text(path, text) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def eval_rows(reports) -> list:
    return [r.row() for r in reports]


def save_lambda_figure(path, lambdas, maps, top1s, baseline_map) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(lambdas, 100 * np.asarray(maps), "o-", label="mAP")
    ax.plot(lambdas, 100 * np.asarray(top1s), "s--", label="top-1")
    ax.axhline(100 * baseline_map, color="gray", lw=1, ls=":",
               label="appearance-only mAP")
    ax.set_xlabel("context weight")
    ax.set_ylabel("retrieval %")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_subset_figure(path, labels, maps) -> None:
    fig, ax = plt.subplots(figsize=(6.5, 3.6))
    x = np.arange(len(labels))
    ax.bar(x, 100 * np.asarray(maps), color="steelblue")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mAP %")
    lo = 100 * min(maps)
    hi = 100 * max(maps)
    pad = max(0.5, 0.1 * (hi - lo))
    ax.set_ylim(max(0.0, lo - pad), min(100.0, hi + pad))
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_compare_figure(path, labels, maps, top1s) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    x = np.arange(len(labels))
    width = 0.38
    ax.bar(x - width / 2, 100 * np.asarray(maps), width, label="mAP")
    ax.bar(x + width / 2, 100 * np.asarray(top1s), width, label="top-1")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("retrieval %")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_figure(path, bench) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    labels = ["appearance", "with head"]
    means = [bench.appearance_ms[0], bench.with_head_ms[0]]
    errs = [bench.appearance_ms[1], bench.with_head_ms[1]]
    ax.bar(labels, means, yerr=errs, color=["gray", "steelblue"], capsize=4)
    ax.set_ylabel("ms per image pair")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_history_figure(path, history) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    epochs = [h.epoch for h in history]
    losses = [h.mean_loss for h in history]
    ax.plot(epochs, losses, "o-")
    frozen = [h.epoch for h in history if h.frozen]
    for e in frozen:
        ax.axvspan(e - 0.5, e + 0.5, color="orange", alpha=0.15)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean matching loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
