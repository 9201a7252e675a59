"""Dependency-free SVG line charts for run traces.

Plots are a convenience; the CSVs are the contract.  Only what a loss curve or
feature-norm trace needs: axes, tick labels, one polyline per series, and a
text legend.
"""

from __future__ import annotations

import math
from typing import Sequence

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2"]


def _finite_points(series):
    pts = [(x, y) for x, y in series if math.isfinite(x) and math.isfinite(y)]
    return pts


def write_line_chart(
    path: str,
    series: dict[str, Sequence[tuple[float, float]]],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    width: int = 840,
    height: int = 480,
    log_y: bool = False,
) -> None:
    margin = 64
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    cleaned = {name: _finite_points(pts) for name, pts in series.items()}
    cleaned = {k: v for k, v in cleaned.items() if v}
    all_pts = [p for pts in cleaned.values() for p in pts]
    if not all_pts:
        raise ValueError("nothing to plot: no finite points")

    def ty(v: float) -> float:
        return math.log10(v) if log_y else v

    xs = [p[0] for p in all_pts]
    ys = [ty(p[1]) for p in all_pts if not log_y or p[1] > 0]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def px(x: float) -> float:
        return margin + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return height - margin - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 16}" text-anchor="middle" '
        f'font-size="12">{x_label}</text>',
        f'<text x="18" y="{height / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {height / 2})">{y_label}</text>',
    ]
    for k in range(5):
        fx = x_lo + (x_hi - x_lo) * k / 4
        fy = y_lo + (y_hi - y_lo) * k / 4
        label_y = f"1e{fy:.2f}" if log_y else f"{fy:.4g}"
        parts.append(
            f'<text x="{px(fx):.1f}" y="{height - margin + 16}" text-anchor="middle" '
            f'font-size="10">{fx:.4g}</text>'
        )
        parts.append(
            f'<text x="{margin - 6}" y="{py(fy):.1f}" text-anchor="end" '
            f'font-size="10">{label_y}</text>'
        )
    for idx, (name, pts) in enumerate(cleaned.items()):
        if log_y:
            pts = [(x, y) for x, y in pts if y > 0]
            if not pts:
                continue
        color = _COLORS[idx % len(_COLORS)]
        coords = " ".join(f"{px(x):.1f},{py(ty(y)):.1f}" for x, y in pts)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.4"/>'
        )
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 14 * idx + 10}" font-size="10" '
            f'fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
