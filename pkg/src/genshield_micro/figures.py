"""Matplotlib renderings written next to the delimited report output."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def render_step_histogram(step_histogram: dict[str, float], path: str | Path) -> None:
    """Bar chart of the fraction of inputs terminating at each round count."""
    rounds = sorted(step_histogram, key=int)
    fracs = [step_histogram[r] for r in rounds]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(rounds, fracs, color="#4878b0")
    ax.set_xlabel("correction rounds")
    ax.set_ylabel("fraction of test inputs")
    ax.set_ylim(0, 1)
    for x, f in zip(rounds, fracs):
        ax.text(x, f + 0.02, f"{f:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_robustness(robustness: dict[str, float], path: str | Path) -> None:
    names = list(robustness)
    accs = [robustness[n] for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(names, accs, color="#b04848")
    ax.set_ylabel("detection accuracy")
    ax.set_ylim(0, 1.05)
    ax.tick_params(axis="x", labelrotation=30)
    for i, a in enumerate(accs):
        ax.text(i, a + 0.02, f"{a:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_oracle_scores(
    oracle_single: dict[str, float], oracle_multi: dict[str, float], path: str | Path
) -> None:
    cats = list(oracle_single)
    x = np.arange(len(cats))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(x - 0.2, [oracle_single[c] for c in cats], width=0.4, label="single-step")
    ax.bar(x + 0.2, [oracle_multi[c] for c in cats], width=0.4, label="multi-step")
    ax.set_xticks(x, cats)
    ax.set_ylabel("oracle artifact score")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_report_figures(report: dict, out_dir: str | Path) -> list[Path]:
    """All report figures; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if report.get("step_histogram"):
        p = out / "step_histogram.png"
        render_step_histogram(report["step_histogram"], p)
        written.append(p)
    if report.get("robustness"):
        p = out / "robustness.png"
        render_robustness(report["robustness"], p)
        written.append(p)
    corr = report.get("correction", {})
    if corr.get("oracle_single"):
        p = out / "oracle_scores.png"
        render_oracle_scores(corr["oracle_single"], corr["oracle_multi"], p)
        written.append(p)
    return written


def render_trajectory(images: list[np.ndarray], path: str | Path, channel: int = 0) -> None:
    """One heatmap per round (first channel) for a correction trajectory."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), squeeze=False)
    for i, (ax, img) in enumerate(zip(axes[0], images)):
        ax.imshow(img[channel], cmap="RdBu_r", vmin=-1, vmax=1)
        ax.set_title(f"round {i + 1}", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
