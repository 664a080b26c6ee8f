"""Deterministic figure emitters: orthographic point-cloud SVGs drawn by
hand for exact byte stability, and matplotlib charts for metric sweeps."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .errors import InvalidParamsError
from .geometry import PointCloud

VIEWS = ("front", "side", "top", "iso")
COLOR_MODES = ("part", "mask", "none")

_SIZE = 512
_MARGIN = 16.0
_RADIUS = 2.0
_BASE = "#1f77b4"
_MASKED = "#d62728"
_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
)
# one salt for every chart so matplotlib's generated ids never drift
_RC = {"svg.hashsalt": "cloudedit"}

_SQ2 = np.sqrt(2.0)
_SQ3 = np.sqrt(3.0)
_SQ6 = np.sqrt(6.0)


def _project(points: np.ndarray, view: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthographic (h, v, depth) triples; depth orders far-to-near."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    if view == "front":
        return x, z, y
    if view == "side":
        return y, z, -x
    if view == "top":
        return x, y, z
    if view == "iso":
        return (x - y) / _SQ2, (2.0 * z - x - y) / _SQ6, (x + y + z) / _SQ3
    raise InvalidParamsError(f"unknown view {view!r}")


def _fills(cloud: PointCloud, color_by: str, mask: np.ndarray | None) -> list[str]:
    k = cloud.k
    if color_by == "none":
        return [_BASE] * k
    if color_by == "mask":
        if mask is None:
            return [_BASE] * k
        return [_MASKED if m else _BASE for m in np.asarray(mask, dtype=bool)]
    if color_by == "part":
        if cloud.labels is None:
            return [_BASE] * k
        return [_PALETTE[int(v) % len(_PALETTE)] for v in cloud.labels]
    raise InvalidParamsError(f"unknown color mode {color_by!r}")


def cloud_svg(cloud: PointCloud, view: str = "front", color_by: str = "part",
              mask: np.ndarray | None = None) -> str:
    """One cloud as a 512x512 SVG of 2px dots, painted far-to-near."""
    h, v, depth = _project(cloud.points, view)
    span = max(float(h.max() - h.min()), float(v.max() - v.min()), 1e-9)
    scale = (_SIZE - 2.0 * _MARGIN) / span
    off_h = (_SIZE - (h.max() - h.min()) * scale) / 2.0
    off_v = (_SIZE - (v.max() - v.min()) * scale) / 2.0
    cx = off_h + (h - h.min()) * scale
    cy = _SIZE - (off_v + (v - v.min()) * scale)
    fills = _fills(cloud, color_by, mask)
    order = np.argsort(depth, kind="stable")
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE}" '
        f'height="{_SIZE}" viewBox="0 0 {_SIZE} {_SIZE}">',
        f'<rect width="{_SIZE}" height="{_SIZE}" fill="#ffffff"/>',
    ]
    for i in order:
        lines.append(
            f'<circle cx="{cx[i]:.2f}" cy="{cy[i]:.2f}" r="{_RADIUS:g}" '
            f'fill="{fills[i]}"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_cloud_svg(path: str | Path, cloud: PointCloud, view: str = "front",
                    color_by: str = "part", mask: np.ndarray | None = None) -> None:
    Path(path).write_text(cloud_svg(cloud, view, color_by, mask), encoding="utf-8")


SWEEP_METRICS = ("gd", "lgd", "cd", "fpd", "dir_sim", "adherence_rate")


def sweep_chart(path: str | Path, param: str, values: Sequence[str],
                reports: Sequence) -> None:
    """Six metric-vs-value line panels, one per aggregate metric."""
    if len(values) != len(reports):
        raise InvalidParamsError("one report per sweep value required")
    if not reports:
        raise InvalidParamsError("empty sweep")
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(10.0, 6.0))
        axes = fig.subplots(2, 3)
        x = np.arange(len(values))
        for ax, name in zip(axes.flat, SWEEP_METRICS):
            ax.plot(x, [getattr(r, name) for r in reports],
                    marker="o", color=_BASE)
            ax.set_xticks(x)
            ax.set_xticklabels([str(v) for v in values])
            ax.set_xlabel(param)
            ax.set_title(name)
            ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})


def report_chart(path: str | Path, rows: Sequence[dict]) -> None:
    """Per-triplet GD and l-GD histograms for one evaluation run."""
    if not rows:
        raise InvalidParamsError("empty report")
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(8.0, 3.5))
        axes = fig.subplots(1, 2)
        for ax, name in zip(axes, ("gd", "lgd")):
            ax.hist([r[name] for r in rows], bins=20, color=_BASE)
            ax.set_xlabel(name)
            ax.set_ylabel("triplets")
        rate = float(np.mean([r["adherence"] for r in rows]))
        fig.suptitle(f"adherence rate {rate:.3f} over {len(rows)} edits")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
