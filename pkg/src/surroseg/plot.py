"""Deterministic SVG scatter maps of 2-D segmentations or prediction fields."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InvalidParameter, UnsupportedDimension
from .graph import SpatialDataset

__all__ = ["render_svg", "plot_svg"]

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)
# a few viridis stops, interpolated linearly
RAMP = ((0.0, (68, 1, 84)), (0.25, (59, 82, 139)), (0.5, (33, 145, 140)), (0.75, (94, 201, 98)), (1.0, (253, 231, 37)))

SIZE = 480
MARGIN = 16
LEGEND_W = 130
RAMP_STEPS = 5


def _ramp(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    for (t0, c0), (t1, c1) in zip(RAMP, RAMP[1:]):
        if t <= t1:
            a = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
            rgb = [round(x0 + a * (x1 - x0)) for x0, x1 in zip(c0, c1)]
            return "#%02x%02x%02x" % tuple(rgb)
    return "#%02x%02x%02x" % RAMP[-1][1]


def _label_color(j: int) -> str:
    return PALETTE[j % len(PALETTE)]


def render_svg(data: SpatialDataset, labels=None, eta=None, title: str | None = None) -> str:
    """Exactly one of ``labels`` (categorical colours) or ``eta`` (sequential ramp)."""
    if data.d != 2:
        raise UnsupportedDimension(f"plots need 2-D points, got d={data.d}")
    if (labels is None) == (eta is None):
        raise InvalidParameter("give either labels or eta")
    pts = data.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1])) or 1.0
    scale = (SIZE - 2 * MARGIN) / span
    xs = MARGIN + (pts[:, 0] - lo[0]) * scale
    ys = SIZE - MARGIN - (pts[:, 1] - lo[1]) * scale
    radius = max(1.0, min(4.0, 600.0 / max(data.n, 1) ** 0.5 / 4))

    legend = []
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != data.n:
            raise InvalidParameter(f"{labels.shape[0]} labels for {data.n} points")
        colors = [_label_color(int(c)) for c in labels]
        for j in np.unique(labels).tolist():
            cnt = int(np.sum(labels == j))
            legend.append((_label_color(j), f"segment {j} ({cnt})"))
    else:
        eta = np.asarray(eta, dtype=float).reshape(-1)
        if eta.shape[0] != data.n:
            raise InvalidParameter(f"{eta.shape[0]} values for {data.n} points")
        emin, emax = float(eta.min()), float(eta.max())
        rng = emax - emin
        colors = [_ramp(0.0 if rng == 0 else (e - emin) / rng) for e in eta.tolist()]
        for k in range(RAMP_STEPS):
            t = k / (RAMP_STEPS - 1)
            legend.append((_ramp(t), f"{emin + t * rng:.4g}"))

    width = SIZE + LEGEND_W
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{SIZE}" '
        f'viewBox="0 0 {width} {SIZE}">',
        f'<rect x="0" y="0" width="{width}" height="{SIZE}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<title>{_escape(title)}</title>')
    out.append('<g class="points" stroke="none">')
    for x, y, c in zip(xs.tolist(), ys.tolist(), colors):
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{radius:.2f}" fill="{c}"/>')
    out.append("</g>")
    out.append(f'<g class="legend" font-family="sans-serif" font-size="11">')
    for k, (c, text) in enumerate(legend):
        y = MARGIN + 18 * k
        out.append(
            f'<g class="legend-entry"><rect x="{SIZE + 8}" y="{y}" width="12" height="12" fill="{c}"/>'
            f'<text x="{SIZE + 26}" y="{y + 10}">{_escape(text)}</text></g>'
        )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def plot_svg(data: SpatialDataset, path, labels=None, eta=None, title: str | None = None) -> None:
    Path(path).write_text(render_svg(data, labels=labels, eta=eta, title=title), encoding="utf-8")
