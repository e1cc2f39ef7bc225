"""Matplotlib rendering for the report bundle.

Figures are rendered headless to PNG bytes with fixed size/dpi and stripped
metadata so repeated runs produce byte-identical files next to the CSVs.
"""

from __future__ import annotations

import io
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .fileio import write_bytes  # noqa: E402

_FIGSIZE = (6.4, 4.2)
_DPI = 110


def _render(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=_DPI, metadata={"Software": None},
                bbox_inches="tight")
    plt.close(fig)
    return buf.getvalue()


def save_grouped_bars(path: str, bin_labels: Sequence[str],
                      series: Mapping[str, Sequence[int]],
                      title: str, ylabel: str = "sequences") -> None:
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    n_series = max(1, len(series))
    width = 0.8 / n_series
    xs = range(len(bin_labels))
    for i, (name, counts) in enumerate(series.items()):
        ax.bar([x + i * width for x in xs], counts, width=width, label=name)
    ax.set_xticks([x + 0.4 - width / 2 for x in xs])
    ax.set_xticklabels(bin_labels, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    write_bytes(path, _render(fig))


def save_heatmap(path: str, matrix, labels: Sequence[str], title: str) -> None:
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    im = ax.imshow(matrix, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(labels)))
    ax.set_yticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_yticklabels(labels)
    for i in range(len(labels)):
        for j in range(len(labels)):
            ax.text(j, i, f"{matrix[i][j]:.2f}", ha="center", va="center",
                    color="white" if matrix[i][j] < 0.5 else "black", fontsize=8)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    write_bytes(path, _render(fig))


def save_lines(path: str, series: Mapping[str, Sequence[tuple[float, float]]],
               title: str, xlabel: str, ylabel: str,
               boundary: float | None = None) -> None:
    """One line per group over (x, y) points; optional context boundary marker."""

    fig, ax = plt.subplots(figsize=_FIGSIZE)
    for name, points in series.items():
        if not points:
            continue
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker=".", markersize=3, label=name)
    if boundary is not None:
        ax.axvline(boundary, color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    write_bytes(path, _render(fig))


def save_scatter_paths(path: str, coords: Mapping[int, Sequence[tuple[float, float]]],
                       title: str) -> None:
    """Per-group trajectories in the shared 2-D projection, step order joined."""

    fig, ax = plt.subplots(figsize=(5.6, 5.0))
    for key, points in coords.items():
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.plot(xs, ys, marker="o", markersize=3, linewidth=0.8, label=f"matched={key}")
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_title(title)
    ax.legend(fontsize=7)
    write_bytes(path, _render(fig))
