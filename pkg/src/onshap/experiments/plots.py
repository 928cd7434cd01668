"""Deterministic static SVG charts for experiment artifacts.

Rendering twice with the same inputs must produce byte-identical files:
the SVG hash salt is pinned, the Date metadata is stripped, and writes
go through a temp file and rename.
"""

from __future__ import annotations

import os
import tempfile

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SALT = "onshap"
_SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")


def _save_atomic(fig, path: str) -> str:
    plt.rcParams["svg.hashsalt"] = _SALT
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".svg")
    os.close(fd)
    try:
        fig.savefig(tmp, format="svg", metadata={"Date": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def save_bar_chart(
    path: str,
    labels: list[str],
    series: list[tuple[str, list, list]],
    title: str = "",
    ylabel: str = "",
) -> str:
    """Grouped bars, one group per label; series = (name, values, errors)."""
    n_groups = len(labels)
    n_series = len(series)
    width = 0.8 / max(n_series, 1)
    fig, ax = plt.subplots(figsize=(max(6.0, 0.9 * n_groups), 4.0))
    for j, (name, values, errors) in enumerate(series):
        offsets = [i + (j - (n_series - 1) / 2.0) * width for i in range(n_groups)]
        ax.bar(
            offsets,
            values,
            width=width,
            yerr=errors,
            capsize=2.0,
            label=name,
            color=_SERIES_COLORS[j % len(_SERIES_COLORS)],
        )
    ax.set_xticks(range(n_groups))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.axhline(0.0, color="black", linewidth=0.8)
    if ylabel:
        ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if n_series > 1:
        ax.legend()
    fig.tight_layout()
    return _save_atomic(fig, path)


def save_curve(
    path: str,
    x: list,
    series: list[tuple[str, list, list]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
) -> str:
    """Lines with error bars; series = (name, y, yerr or None)."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for j, (name, y, yerr) in enumerate(series):
        ax.errorbar(
            x,
            y,
            yerr=yerr,
            label=name,
            color=_SERIES_COLORS[j % len(_SERIES_COLORS)],
            marker="o",
            markersize=3.5,
            capsize=2.0,
        )
    if xlabel:
        ax.set_xlabel(xlabel)
    if ylabel:
        ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save_atomic(fig, path)


def save_heatmap_row(
    path: str,
    images: list,
    titles: list[str],
    suptitle: str = "",
    diverging: bool = True,
) -> str:
    """Square heatmaps side by side; each image scaled symmetrically so
    zero sits at the colour midpoint (signed attribution maps)."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(3.0 * n, 3.2))
    if n == 1:
        axes = [axes]
    for ax, img, ttl in zip(axes, images, titles):
        if diverging:
            bound = max(abs(float(img.min())), abs(float(img.max())), 1e-12)
            ax.imshow(img, cmap="RdBu_r", vmin=-bound, vmax=bound)
        else:
            ax.imshow(img, cmap="gray")
        ax.set_title(ttl, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    if suptitle:
        fig.suptitle(suptitle)
    fig.tight_layout()
    return _save_atomic(fig, path)
