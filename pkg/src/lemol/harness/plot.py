"""Dependency-free SVG line plots with a shaded one-std band.

The source data rides along inside the SVG as a comment block, so every
plotted value can be recovered with :func:`parse_svg_data`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .aggregate import AggregateCurve, sliding_mean

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
DATA_BEGIN = "<!-- lemol-data"
DATA_END = "-->"


@dataclass
class PlotData:
    mean: np.ndarray
    std: np.ndarray
    plot_mean: np.ndarray
    plot_std: np.ndarray


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(curves: Mapping[str, AggregateCurve], title: str = "", ylabel: str = "",
               window: int = 50, width: int = 720, height: int = 420) -> str:
    """Curves are smoothed with a trailing ``window``-episode mean before drawing."""
    if not curves:
        raise ValueError("nothing to plot")
    smoothed = {k: (sliding_mean(c.mean, window), sliding_mean(c.std, window)) for k, c in curves.items()}
    lo = min(float(np.min(m - s)) for m, s in smoothed.values())
    hi = max(float(np.max(m + s)) for m, s in smoothed.values())
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    n = max(len(c.mean) for c in curves.values())
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def xy(i, v):
        x = left + (pw * i / max(n - 1, 1))
        y = top + ph * (1.0 - (v - lo) / (hi - lo))
        return f"{_fmt(x)},{_fmt(y)}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="22" text-anchor="middle" font-size="15">{title}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
           f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle" font-size="12">episode</text>',
           f'<text x="16" y="{top + ph / 2}" font-size="12" transform="rotate(-90 16 {top + ph / 2})" '
           f'text-anchor="middle">{ylabel}</text>']
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * (hi - lo)
        y = top + ph * (1.0 - frac)
        out.append(f'<text x="{left - 6}" y="{_fmt(y + 4)}" text-anchor="end" font-size="10">{v:.3g}</text>')
    out.append(f'<text x="{left + pw}" y="{top + ph + 16}" text-anchor="end" font-size="10">{n - 1}</text>')
    for j, (label, (m, s)) in enumerate(smoothed.items()):
        color = PALETTE[j % len(PALETTE)]
        upper = [xy(i, v) for i, v in enumerate(m + s)]
        lower = [xy(i, v) for i, v in reversed(list(enumerate(m - s)))]
        out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        out.append(f'<polyline points="{" ".join(xy(i, v) for i, v in enumerate(m))}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        ly = top + 16 * j + 8
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}" font-size="11">{label}</text>')
    out.append(_data_block(curves, smoothed, window))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _data_block(curves, smoothed, window) -> str:
    buf = io.StringIO()
    buf.write(f"{DATA_BEGIN} window={window}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "episode", "mean", "std", "plot_mean", "plot_std", "n_runs"])
    for label, c in curves.items():
        pm, ps = smoothed[label]
        for i in range(len(c.mean)):
            w.writerow([label, i, repr(float(c.mean[i])), repr(float(c.std[i])), repr(float(pm[i])),
                        repr(float(ps[i])), c.n_runs])
    buf.write(DATA_END)
    return buf.getvalue()


def parse_svg_data(svg: str) -> tuple[dict[str, PlotData], int]:
    """Recover the embedded table: ``({label: PlotData}, window)``."""
    start = svg.index(DATA_BEGIN)
    end = svg.index(DATA_END, start)
    lines = svg[start:end].splitlines()
    window = int(lines[0].split("window=")[1])
    rows = list(csv.reader(lines[2:]))
    out: dict[str, list] = {}
    for r in rows:
        out.setdefault(r[0], []).append([float(v) for v in r[2:6]])
    return {k: PlotData(*np.array(v).T) for k, v in out.items()}, window
