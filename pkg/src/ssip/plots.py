"""Static figure emitters (files only, no interactive display)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _valid(xs):
    return [math.nan if x is None else x for x in xs]


def plot_sweep(result: dict, path: str | Path) -> None:
    """RMSE and NCC against support count, baseline as dotted horizontal lines."""
    counts = result["counts"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key, label in ((axes[0], "rmse", "RMSE"), (axes[1], "ncc", "NCC")):
        ys = _valid(result[key])
        ax.plot(counts, ys, marker="o", label="SSIPNet")
        for x, y in zip(counts, ys):
            if not math.isnan(y):
                ax.annotate(f"{y:.3f}", (x, y), textcoords="offset points", xytext=(0, 6),
                            ha="center", fontsize=7)
        base = (result.get("baseline") or {}).get(key)
        if base is not None:
            ax.axhline(base, linestyle=":", color="gray", label="audiogram baseline")
        ax.set_xscale("log", base=2)
        ax.set_xticks(counts)
        ax.set_xticklabels([str(c) for c in counts])
        ax.set_xlabel("number of support (audio, score) pairs")
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_correlations(report: dict, out_dir: str | Path) -> list[Path]:
    """Scatter + regression line + Pearson r for hearing loss vs intelligibility and vs level."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hl = np.array([p["hl"] for p in report["scatter"]])
    written = []
    panels = (
        ("hl_vs_intelligibility", "mean_intelligibility", "mean intelligibility score (%)", "hl_vs_intelligibility.png"),
        ("hl_vs_rms", "mean_level", "mean audio RMS level (dB SPL)", "hl_vs_rms.png"),
    )
    for key, field, ylabel, name in panels:
        y = np.array([p[field] for p in report["scatter"]])
        rel = report[key]
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.scatter(hl, y, s=14)
        if rel["slope"] is not None and not math.isnan(rel["slope"]):
            xs = np.linspace(hl.min(), hl.max(), 50)
            ax.plot(xs, rel["slope"] * xs + rel["intercept"], linestyle=":", color="k")
        r = rel["r"]
        ax.set_title(f"r = {r:.2f}" if r is not None and not math.isnan(r) else "r undefined")
        ax.set_xlabel("average hearing loss at 0.5/1/2 kHz (dB HL)")
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        fig.savefig(out / name, dpi=120)
        plt.close(fig)
        written.append(out / name)
    return written
