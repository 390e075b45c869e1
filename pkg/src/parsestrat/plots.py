"""Standalone SVG scatter charts with error whiskers, plus their CSV twins."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

COLORS = {"LSTM": "#1b9e77", "TD": "#d95f02", "LC": "#7570b3"}
MARKERS = {"LSTM": "square", "TD": "triangle", "LC": "circle"}


@dataclass
class Point:
    group: str
    label: str
    x: float
    y: float
    xerr: float = 0.0
    yerr: float = 0.0


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return [0.0, 1.0]
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + step * 0.5:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _marker(kind: str, cx: float, cy: float, color: str) -> str:
    if kind == "square":
        return f'<rect x="{_fmt(cx - 4)}" y="{_fmt(cy - 4)}" width="8" height="8" fill="{color}"/>'
    if kind == "triangle":
        pts = f"{_fmt(cx)},{_fmt(cy - 5)} {_fmt(cx - 5)},{_fmt(cy + 4)} {_fmt(cx + 5)},{_fmt(cy + 4)}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    return f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="4.5" fill="{color}"/>'


def scatter_svg(points: Sequence[Point], x_label: str, y_label: str, title: str = "",
                width: int = 640, height: int = 440) -> str:
    left, right, top, bottom = 78, 130, 40, 60
    pw, ph = width - left - right, height - top - bottom
    finite = [p for p in points if math.isfinite(p.x) and math.isfinite(p.y)]
    if finite:
        xs = [p.x - p.xerr for p in finite] + [p.x + p.xerr for p in finite]
        ys = [p.y - p.yerr for p in finite] + [p.y + p.yerr for p in finite]
        xt, yt = nice_ticks(min(xs), max(xs)), nice_ticks(min(ys), max(ys))
    else:
        xt = yt = [0.0, 1.0]
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{left + pw / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
    for t in xt:
        x = sx(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{top + ph}" x2="{_fmt(x)}" y2="{top + ph + 5}" stroke="#333"/>')
        out.append(f'<text x="{_fmt(x)}" y="{top + ph + 19}" text-anchor="middle">{t:g}</text>')
    for t in yt:
        y = sy(t)
        out.append(f'<line x1="{left - 5}" y1="{_fmt(y)}" x2="{left}" y2="{_fmt(y)}" stroke="#333"/>')
        out.append(f'<line x1="{left}" y1="{_fmt(y)}" x2="{left + pw}" y2="{_fmt(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 8}" y="{_fmt(y + 4)}" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 16}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="18" y="{top + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {top + ph / 2:.2f})">{escape(y_label)}</text>')
    for p in finite:
        color = COLORS.get(p.group, "#444")
        cx, cy = sx(p.x), sy(p.y)
        if p.xerr > 0:
            out.append(f'<line x1="{_fmt(sx(p.x - p.xerr))}" y1="{_fmt(cy)}" x2="{_fmt(sx(p.x + p.xerr))}" '
                       f'y2="{_fmt(cy)}" stroke="{color}"/>')
        if p.yerr > 0:
            out.append(f'<line x1="{_fmt(cx)}" y1="{_fmt(sy(p.y - p.yerr))}" x2="{_fmt(cx)}" '
                       f'y2="{_fmt(sy(p.y + p.yerr))}" stroke="{color}"/>')
        out.append(_marker(MARKERS.get(p.group, "circle"), cx, cy, color))
        if p.label:
            out.append(f'<text x="{_fmt(cx + 7)}" y="{_fmt(cy - 6)}" font-size="10" fill="{color}">{escape(p.label)}</text>')
    groups = sorted({p.group for p in points}, key=lambda g: (list(COLORS).index(g) if g in COLORS else 99, g))
    for i, g in enumerate(groups):
        y = top + 14 + i * 20
        out.append(_marker(MARKERS.get(g, "circle"), left + pw + 20, y - 4, COLORS.get(g, "#444")))
        out.append(f'<text x="{left + pw + 32}" y="{y}">{escape(g)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_scatter(svg_path, csv_path, points: Sequence[Point], x_label: str, y_label: str, title: str = "") -> None:
    with open(svg_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(scatter_svg(points, x_label, y_label, title))
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "label", "x", "x_sd", "y", "y_sd"])
        for p in points:
            w.writerow([p.group, p.label, repr(p.x), repr(p.xerr), repr(p.y), repr(p.yerr)])
