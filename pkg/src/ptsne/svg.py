"""Byte-deterministic SVG scatter plots.

The emitter writes one circle per point with fixed-precision
coordinates and no timestamps or generator comments, so the same
positions and options always produce the same bytes.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import sq_distances
from .errors import ConfigError

CANVAS = 800.0
MARGIN_FRACTION = 0.05

#: single-hue fill used when no coloring is requested
PLAIN_FILL = "#1f77b4"

#: categorical palette for label coloring, cycled in label-first-seen order
PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
]

_RANK_NEAR = (214, 39, 40)   # red for the closest points
_RANK_FAR = (31, 119, 180)   # blue for the farthest


def rank_colors(y: np.ndarray, ref_point: int) -> list[str]:
    """Red-to-blue fills by rank of embedding distance from one point."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = y.shape[0]
    if not 0 <= ref_point < n:
        raise ConfigError(f"ref point {ref_point} out of range for n={n}")
    d2 = sq_distances(y[ref_point:ref_point + 1], y)[0]
    order = np.argsort(d2, kind="stable")
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    colors = []
    for r in rank:
        t = r / max(n - 1, 1)
        rgb = tuple(
            int(round(a + t * (b - a))) for a, b in zip(_RANK_NEAR, _RANK_FAR)
        )
        colors.append("#%02x%02x%02x" % rgb)
    return colors


def label_colors(labels: Sequence[str]) -> list[str]:
    """Categorical fills assigned by order of first appearance."""
    seen: dict[str, str] = {}
    colors = []
    for lab in labels:
        if lab not in seen:
            seen[lab] = PALETTE[len(seen) % len(PALETTE)]
        colors.append(seen[lab])
    return colors


def scatter_svg(
    y: np.ndarray,
    colors: Optional[Sequence[str]] = None,
    point_size: float = 2.0,
) -> str:
    """Render positions as an 800x800 SVG scatter, 5% margin per side.

    A shared scale on both axes preserves the embedding's aspect ratio;
    the vertical axis is flipped so larger y plots higher.
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 2 or y.shape[0] < 1:
        raise ConfigError("positions must have shape (n, 2) with n >= 1")
    if colors is None:
        colors = [PLAIN_FILL] * y.shape[0]
    if len(colors) != y.shape[0]:
        raise ConfigError("one fill color per point required")
    if point_size <= 0:
        raise ConfigError("point size must be positive")

    xmin, ymin = y.min(axis=0)
    xmax, ymax = y.max(axis=0)
    span = max(xmax - xmin, ymax - ymin, 1e-12)
    span *= 1.0 + 2.0 * MARGIN_FRACTION
    cx = 0.5 * (xmin + xmax)
    cy = 0.5 * (ymin + ymax)
    scale = CANVAS / span
    x0 = cx - 0.5 * span
    y0 = cy - 0.5 * span

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS:.0f}" '
        f'height="{CANVAS:.0f}" viewBox="0 0 {CANVAS:.0f} {CANVAS:.0f}">',
        f'<rect width="{CANVAS:.0f}" height="{CANVAS:.0f}" fill="#ffffff"/>',
    ]
    for (px, py), fill in zip(y, colors):
        sx = (px - x0) * scale
        sy = CANVAS - (py - y0) * scale
        lines.append(
            f'<circle cx="{sx:.3f}" cy="{sy:.3f}" r="{point_size:.3f}" '
            f'fill="{fill}"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
