"""SVG figures for evaluation results: spike raster, MR vs CDI, MR/FDR/FNR bars."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MatchMetrics, MatchResult  # noqa: E402

# fixed ids and no timestamp so that identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "pfpdecomp"
_META = {"Date": None, "Creator": None}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def raster(path, match: MatchResult, sample_rate: float, title: str = "") -> None:
    """Matched online (dark) and reference (light) trains, one row pair per MU."""
    n = max(len(match.pairs), 1)
    fig, ax = plt.subplots(figsize=(8, 0.35 * n + 1.2))
    for row, p in enumerate(match.pairs):
        r = match.reference[p.reference_id].firing_samples / sample_rate
        o = (match.online[p.online_id].firing_samples + p.lag) / sample_rate
        ax.vlines(r, row - 0.4, row, color="0.65", lw=0.6)
        ax.vlines(o, row, row + 0.4, color="k", lw=0.6)
    ax.set_yticks(range(len(match.pairs)), [f"{p.online_id}/{p.reference_id}" for p in match.pairs], fontsize=6)
    ax.set_ylim(-0.6, n - 0.4)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("online / reference MU")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def mr_vs_cdi(path, metrics: MatchMetrics, cdi: dict) -> None:
    """Scatter of per-MU matching rate against the composite decomposability index."""
    pts = [(cdi[p.reference_id], p.mr) for p in metrics.pairs if p.reference_id in cdi]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    if pts:
        x, y = np.array(pts).T
        ax.scatter(x, y, s=12, color="k")
    ax.set_xlabel("CDI")
    ax.set_ylabel("MR")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    _save(fig, path)


def rate_bars(path, groups: dict[str, MatchMetrics]) -> None:
    """Grouped MR/FDR/FNR bars, one group per label (e.g. noise level or selector)."""
    labels = list(groups)
    names = ("mr", "fdr", "fnr")
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels) + 2), 3.5))
    for i, (name, shade) in enumerate(zip(names, ("0.15", "0.55", "0.85"))):
        vals = [getattr(groups[g], name) for g in labels]
        ax.bar(x + (i - 1) * 0.27, vals, 0.27, label=name.upper(), color=shade, edgecolor="k", lw=0.4)
    ax.set_xticks(x, labels)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    _save(fig, path)
