"""SVG figures: orthographic projections colored by point index.

Colors come from the mean shape: each index gets the RGB of its normalized
mean-shape position, so a shape that keeps correspondence reproduces the
same color pattern as the reference.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PANELS = (("xy", 0, 1), ("xz", 0, 2), ("yz", 1, 2))


def index_colormap(mean_points: np.ndarray) -> list[str]:
    """Hex color per index from normalized mean-shape coordinates (x, y, z -> R, G, B)."""
    p = np.asarray(mean_points, dtype=np.float64)
    lo, hi = p.min(axis=0), p.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    rgb = np.rint(255 * (p - lo) / span).astype(int)
    return ["#%02x%02x%02x" % tuple(c) for c in rgb]


def diverging_colors(values: np.ndarray, limit: float | None = None) -> list[str]:
    """Orange for negative (inward), white at zero, blue for positive."""
    v = np.asarray(values, dtype=np.float64)
    limit = limit or float(np.max(np.abs(v))) or 1.0
    s = np.clip(v / limit, -1.0, 1.0)
    neg = np.array([230, 120, 20])
    pos = np.array([40, 90, 200])
    white = np.array([255, 255, 255])
    out = []
    for x in s:
        c = white + (neg - white) * (-x) if x < 0 else white + (pos - white) * x
        out.append("#%02x%02x%02x" % tuple(np.rint(c).astype(int)))
    return out


def projection_svg(points: np.ndarray, colors: list[str], title: str = "", size: int = 240,
                   extent: float | None = None, radius: float = 3.0) -> str:
    """Three side-by-side orthographic panels (xy, xz, yz); one circle per point per panel."""
    p = np.asarray(points, dtype=np.float64)
    if len(colors) != p.shape[0]:
        raise ValueError("one color per point is required")
    extent = extent or float(np.max(np.abs(p))) * 1.1 or 1.0
    half = size / 2.0
    width = size * len(PANELS)
    height = size + 24
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<title>{escape(title)}</title>",
    ]
    for j, (name, a, b) in enumerate(PANELS):
        x0 = j * size
        parts.append(f'<g class="panel" id="panel-{name}">')
        parts.append(f'<rect x="{x0}" y="0" width="{size}" height="{size}" fill="none" stroke="#999"/>')
        parts.append(f'<text x="{x0 + 6}" y="{size + 16}" font-size="12" font-family="sans-serif">{name}</text>')
        # paint far points first along the hidden axis
        hidden = 3 - a - b
        for i in np.argsort(p[:, hidden], kind="stable"):
            cx = x0 + half + half * p[i, a] / extent
            cy = half - half * p[i, b] / extent
            parts.append(
                f'<circle data-index="{i}" cx="{cx:.2f}" cy="{cy:.2f}" r="{radius}" fill="{colors[i]}"/>'
            )
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
