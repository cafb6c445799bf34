"""Dependency-free SVG output: attention heatmaps and loss curves."""
from __future__ import annotations

import math
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _doc(width: float, height: float, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
            f'viewBox="0 0 {width:.0f} {height:.0f}" font-family="monospace">')
    return "\n".join([head, f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>', *body, "</svg>"]) + "\n"


def heatmap(weights: np.ndarray, labels: Sequence[str], title: str = "", cell: int = 20) -> str:
    """Grayscale ``[query, key]`` grid, darker = more attention."""
    weights = np.asarray(weights, dtype=float)
    rows, cols = weights.shape
    margin = 30
    top = margin + (20 if title else 0)
    body = []
    if title:
        body.append(f'<text x="{margin}" y="16" font-size="13">{escape(title)}</text>')
    for i in range(rows):
        y = top + i * cell
        body.append(f'<text x="{margin - 4}" y="{y + cell * 0.7:.1f}" font-size="10" '
                    f'text-anchor="end">{escape(labels[i])}</text>')
        for j in range(cols):
            level = int(round(255 * (1.0 - min(max(weights[i, j], 0.0), 1.0))))
            body.append(f'<rect x="{margin + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                        f'fill="rgb({level},{level},{level})" stroke="#ddd" stroke-width="0.5"/>')
    for j in range(cols):
        x = margin + j * cell + cell / 2
        body.append(f'<text x="{x:.1f}" y="{top - 4}" font-size="10" text-anchor="middle">'
                    f'{escape(labels[j])}</text>')
    return _doc(margin * 2 + cols * cell, top + rows * cell + margin, body)


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
               log_y: bool = True, width: int = 720, height: int = 360) -> str:
    """Polylines for each named ``(x, y)`` series; NaNs break the line."""
    left, right, top, bottom = 60, 120, 30, 40
    xs = [x for s in series.values() for x in s[0]]
    ys = [y for s in series.values() for y in s[1] if y is not None and math.isfinite(y) and (y > 0 or not log_y)]
    if not xs or not ys:
        return _doc(width, height, [f'<text x="10" y="20">{escape(title)} (no data)</text>'])
    fy = (lambda v: math.log10(v)) if log_y else (lambda v: v)
    x0, x1 = min(xs), max(xs)
    y0, y1 = fy(min(ys)), fy(max(ys))
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (fy(y) - y0) / (y1 - y0)) * ph

    body = [f'<text x="{left}" y="18" font-size="13">{escape(title)}</text>',
            f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(5):
        v = y0 + (y1 - y0) * k / 4
        y = top + (1 - k / 4) * ph
        lab = f"{10 ** v:.3g}" if log_y else f"{v:.3g}"
        body.append(f'<text x="{left - 4}" y="{y + 3:.1f}" font-size="10" text-anchor="end">{lab}</text>')
    for k in range(5):
        v = x0 + (x1 - x0) * k / 4
        body.append(f'<text x="{px(v):.1f}" y="{top + ph + 14}" font-size="10" text-anchor="middle">{v:.0f}</text>')
    for idx, (name, (sx, sy)) in enumerate(series.items()):
        color = PALETTE[idx % len(PALETTE)]
        segs, cur = [], []
        for x, y in zip(sx, sy):
            if y is None or not math.isfinite(y) or (log_y and y <= 0):
                if cur:
                    segs.append(cur)
                cur = []
                continue
            cur.append(f"{px(x):.1f},{py(y):.1f}")
        if cur:
            segs.append(cur)
        for seg in segs:
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{" ".join(seg)}"/>')
        ly = top + 12 + idx * 14
        body.append(f'<line x1="{width - right + 10}" y1="{ly - 4}" x2="{width - right + 28}" y2="{ly - 4}" '
                    f'stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{width - right + 32}" y="{ly}" font-size="11">{escape(name)}</text>')
    return _doc(width, height, body)
