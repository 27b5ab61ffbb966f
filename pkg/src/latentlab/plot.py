"""Minimal SVG 1.1 line/scatter plots for CSV outputs."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT = 640, 420
MARGIN = (70, 20, 40, 50)  # left, right, top, bottom


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (step * m) <= n:
            step *= m
            break
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * abs(hi):
        out.append(v)
        v += step
    return out


def _fmt(v: float, log: bool) -> str:
    if log:
        return f"1e{v:.0f}" if float(v).is_integer() else f"{10 ** v:.3g}"
    return f"{v:.4g}"


def line_plot(series: dict, xlabel: str = "x", ylabel: str = "y", title: str = "", logx: bool = False,
              logy: bool = False, markers: bool = True) -> str:
    """``series`` maps a label to ``(xs, ys)``. Non-finite or non-positive (on log axes) points are dropped."""
    pts = {}
    for name, (xs, ys) in series.items():
        keep = []
        for x, y in zip(xs, ys):
            x, y = float(x), float(y)
            if not (math.isfinite(x) and math.isfinite(y)) or (logx and x <= 0) or (logy and y <= 0):
                continue
            keep.append((math.log10(x) if logx else x, math.log10(y) if logy else y))
        pts[name] = sorted(keep)
    allp = [p for v in pts.values() for p in v]
    if allp:
        x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
        y0, y1 = min(p[1] for p in allp), max(p[1] for p in allp)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, right, top, bottom = MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.1f}" y1="{top + ph}" x2="{sx(t):.1f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.1f}" y="{top + ph + 18}" font-size="11" text-anchor="middle">'
                   f'{escape(_fmt(t, logx))}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{sy(t):.1f}" x2="{left}" y2="{sy(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{sy(t) + 4:.1f}" font-size="11" text-anchor="end">'
                   f'{escape(_fmt(t, logy))}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{HEIGHT - 10}" font-size="13" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2})">{escape(ylabel)}</text>')
    if title:
        out.append(f'<text x="{left + pw / 2}" y="{top - 12}" font-size="14" text-anchor="middle">'
                   f'{escape(title)}</text>')
    for i, (name, p) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        if len(p) > 1:
            path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in p)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if markers:
            out.extend(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="{color}"/>' for x, y in p)
        ly = top + 14 + 16 * i
        out.append(f'<rect x="{left + pw - 150}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{left + pw - 135}" y="{ly}" font-size="11">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(path: str | Path, x: str, y: str, group: str | None = None, **kwargs) -> str:
    """Line plot of column ``y`` against ``x``, one series per value of ``group``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and (x not in rows[0] or y not in rows[0] or (group and group not in rows[0])):
        raise KeyError(f"columns {x!r}/{y!r}/{group!r} not all present in {path}")
    series: dict = {}
    for r in rows:
        key = r[group] if group else y
        xs, ys = series.setdefault(key, ([], []))
        xs.append(float(r[x]))
        ys.append(float(r[y]))
    kwargs.setdefault("xlabel", x)
    kwargs.setdefault("ylabel", y)
    return line_plot(series, **kwargs)
