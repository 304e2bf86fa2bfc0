"""Minimal dependency-free SVG line plots.

Output carries no timestamps or environment metadata, so reruns are
byte-identical. Coordinates are rounded to two decimals to keep files small.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

__all__ = ["line_plot"]

_PALETTE = ("#1f6fb4", "#c23b22", "#3a9d5d", "#8a5fbf", "#c78f1e", "#5b5b5b")


def _ticks(lo: float, hi: float, n: int = 5):
    if not math.isfinite(lo) or not math.isfinite(hi) or lo == hi:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / max(n, 1)))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out = []
    x = first
    while x <= hi + 1e-12 * span:
        out.append(round(x, 10))
        x += step
    return out


def line_plot(path, x: Sequence[float], series: Sequence[dict],
              bands: Sequence[dict] = (), title: str = "",
              x_label: str = "", y_label: str = "",
              vline: Optional[float] = None,
              width: int = 640, height: int = 360):
    """Write a line plot as SVG.

    series: dicts with keys y (sequence), name, and optional color/dash.
    bands: dicts with keys lo, hi (sequences) and optional color/opacity.
    vline: optional vertical marker position in x units.
    """
    x = [float(v) for v in x]
    margin = {"l": 56, "r": 14, "t": 28 if title else 14, "b": 42}
    pw = width - margin["l"] - margin["r"]
    ph = height - margin["t"] - margin["b"]

    ys = [float(v) for s in series for v in s["y"] if math.isfinite(v)]
    for band in bands:
        ys += [float(v) for v in band["lo"] if math.isfinite(v)]
        ys += [float(v) for v in band["hi"] if math.isfinite(v)]
    if not ys or not x:
        ys, x = [0.0, 1.0], x or [0.0, 1.0]
    x_lo, x_hi = min(x), max(x)
    y_lo, y_hi = min(ys), max(ys)
    if x_lo == x_hi:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_lo == y_hi:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v):
        return margin["l"] + (v - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return margin["t"] + (y_hi - v) / (y_hi - y_lo) * ph

    def pts(xs, yv):
        return " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, yv)
                        if math.isfinite(b))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        '<style>text{font-family:sans-serif;font-size:11px;fill:#333}'
        '.t{font-size:13px;font-weight:bold}</style>',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text class="t" x="{width / 2:.0f}" y="17" '
                     f'text-anchor="middle">{title}</text>')

    for xt in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{sx(xt):.2f}" y1="{margin["t"]}" '
                     f'x2="{sx(xt):.2f}" y2="{margin["t"] + ph}" '
                     'stroke="#eee"/>')
        parts.append(f'<text x="{sx(xt):.2f}" y="{margin["t"] + ph + 16}" '
                     f'text-anchor="middle">{xt:g}</text>')
    for yt in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{margin["l"]}" y1="{sy(yt):.2f}" '
                     f'x2="{margin["l"] + pw}" y2="{sy(yt):.2f}" '
                     'stroke="#eee"/>')
        parts.append(f'<text x="{margin["l"] - 6}" y="{sy(yt) + 4:.2f}" '
                     f'text-anchor="end">{yt:g}</text>')
    parts.append(f'<rect x="{margin["l"]}" y="{margin["t"]}" width="{pw}" '
                 f'height="{ph}" fill="none" stroke="#999"/>')

    for band in bands:
        color = band.get("color", "#c23b22")
        opacity = band.get("opacity", 0.18)
        fwd = [(a, b) for a, b in zip(x, band["hi"]) if math.isfinite(b)]
        rev = [(a, b) for a, b in zip(x, band["lo"]) if math.isfinite(b)][::-1]
        if fwd and rev:
            poly = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in fwd + rev)
            parts.append(f'<polygon points="{poly}" fill="{color}" '
                         f'fill-opacity="{opacity}" stroke="none"/>')

    if vline is not None:
        parts.append(f'<line x1="{sx(vline):.2f}" y1="{margin["t"]}" '
                     f'x2="{sx(vline):.2f}" y2="{margin["t"] + ph}" '
                     'stroke="#666" stroke-dasharray="4,3"/>')

    for k, s in enumerate(series):
        color = s.get("color", _PALETTE[k % len(_PALETTE)])
        dash = ' stroke-dasharray="5,3"' if s.get("dash") else ""
        parts.append(f'<polyline points="{pts(x, s["y"])}" fill="none" '
                     f'stroke="{color}" stroke-width="1.6"{dash}/>')
        if s.get("name"):
            ly = margin["t"] + 14 + 14 * k
            lx = margin["l"] + pw - 130
            parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" '
                         f'y2="{ly - 4}" stroke="{color}" stroke-width="1.6"{dash}/>')
            parts.append(f'<text x="{lx + 22}" y="{ly}">{s["name"]}</text>')

    if x_label:
        parts.append(f'<text x="{margin["l"] + pw / 2:.0f}" '
                     f'y="{height - 8}" text-anchor="middle">{x_label}</text>')
    if y_label:
        parts.append(f'<text x="14" y="{margin["t"] + ph / 2:.0f}" '
                     f'text-anchor="middle" transform="rotate(-90 14 '
                     f'{margin["t"] + ph / 2:.0f})">{y_label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
