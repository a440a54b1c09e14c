"""Dependency-free SVG line charts for training logs and sweep tables."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import EmptyInputError, ParseError

WIDTH, HEIGHT = 640, 400
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def _fmt(v):
    return f"{v:.4g}"


def line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """Render {name: (xs, ys)} as an SVG document.

    Each series becomes one <path> (one M/L command per data point) plus a
    circle marker per point.
    """
    series = {k: (np.asarray(x, float), np.asarray(y, float)) for k, (x, y) in series.items()}
    if not series or all(len(x) == 0 for x, _ in series.values()):
        raise EmptyInputError("nothing to plot")
    xs = np.concatenate([x for x, _ in series.values()])
    ys = np.concatenate([y for _, y in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, right, top, bottom = MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line class="axis" x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for v in _ticks(x0, x1):
        out.append(f'<text x="{sx(v):.2f}" y="{top + ph + 15}" text-anchor="middle">{_fmt(v)}</text>')
    for v in _ticks(y0, y1):
        out.append(f'<text x="{left - 5}" y="{sy(v) + 4:.2f}" text-anchor="end">{_fmt(v)}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, (x, y)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        order = np.argsort(x, kind="stable")
        pts = [(sx(a), sy(b)) for a, b in zip(x[order], y[order])]
        d = " ".join(f"{'M' if j == 0 else 'L'}{px:.2f},{py:.2f}" for j, (px, py) in enumerate(pts))
        out.append(f'<path class="series" data-name="{escape(name)}" d="{d}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        out.extend(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2.5" fill="{color}"/>' for px, py in pts)
        out.append(f'<text x="{left + pw - 5}" y="{top + 14 * (i + 1)}" text-anchor="end" '
                   f'fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_columns(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")
    cols = {}
    for name in rows[0]:
        try:
            cols[name] = np.array([float(r[name]) for r in rows])
        except (TypeError, ValueError):
            cols[name] = [r[name] for r in rows]
    return cols


def chart_from_csv(path, title=None) -> str:
    """Sweep tables (fraction,seed,metric,value) plot seed-mean per metric
    against fraction; any other CSV plots its numeric columns against the first."""
    path = Path(path)
    cols = read_columns(path)
    names = list(cols)
    title = title or path.stem
    if set(names) >= {"fraction", "seed", "metric", "value"}:
        acc = defaultdict(list)
        for f, m, v in zip(cols["fraction"], cols["metric"], cols["value"]):
            acc[(m, float(f))].append(float(v))
        series = {}
        for m in sorted({m for m, _ in acc}):
            fr = sorted(f for mm, f in acc if mm == m)
            series[m] = (fr, [float(np.mean(acc[(m, f)])) for f in fr])
        return line_chart(series, title, "training fraction", "metric")
    xname = names[0]
    if not isinstance(cols[xname], np.ndarray):
        raise ParseError(f"{path}: first column {xname!r} is not numeric")
    series = {n: (cols[xname], cols[n]) for n in names[1:] if isinstance(cols[n], np.ndarray)}
    if not series:
        raise ParseError(f"{path}: no numeric columns to plot")
    return line_chart(series, title, xname, ", ".join(series))


def plot_csv(path, out_path, title=None) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(chart_from_csv(path, title), encoding="utf-8")
    return out_path
