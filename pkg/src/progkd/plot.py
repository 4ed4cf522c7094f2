"""Deterministic SVG line charts of per-epoch metric curves.

The output depends only on the input text and file names, so identical
inputs always give byte-identical charts.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 800, 500
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 190, 40, 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")


class PlotError(ValueError):
    """Malformed metrics input; the message names the file and line."""


def read_curve(text: str, source: str = "<csv>", metric: str = "map") -> tuple[list[float], list[float]]:
    """Parse ``epoch`` and ``metric`` columns from metrics CSV text.

    Raises:
        PlotError: Empty input, missing columns, or a row that is short or
            not numeric. Line numbers are 1-based and count the header.
    """
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise PlotError(f"{source}: line 1: empty file, expected a header with epoch and {metric}")
    header = next(csv.reader([lines[0]]))
    header = [h.strip() for h in header]
    for col in ("epoch", metric):
        if col not in header:
            raise PlotError(f"{source}: line 1: header lacks a {col!r} column")
    ie, im = header.index("epoch"), header.index(metric)
    xs, ys = [], []
    for lineno, row in enumerate(csv.reader(io.StringIO("\n".join(lines[1:]))), start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise PlotError(f"{source}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            x, y = float(row[ie]), float(row[im])
        except ValueError:
            raise PlotError(f"{source}: line {lineno}: non-numeric epoch or {metric} value") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise PlotError(f"{source}: line {lineno}: non-finite value")
        xs.append(x)
        ys.append(y)
    if not xs:
        raise PlotError(f"{source}: line 2: no data rows")
    return xs, ys


def _nice_step(span: float, ticks: int = 5) -> float:
    raw = span / ticks
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 2.5, 5, 10):
        if m * mag >= raw:
            return m * mag
    return 10 * mag


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(curves: Sequence[tuple[str, list[float], list[float]]], metric: str = "map",
               title: str = "") -> str:
    """SVG text with one polyline per ``(label, xs, ys)`` curve."""
    if not curves:
        raise PlotError("nothing to plot")
    x_max = max(max(xs) for _, xs, _ in curves)
    x_min = min(min(xs) for _, xs, _ in curves)
    y_max = max(max(ys) for _, _, ys in curves)
    x_max = x_max if x_max > x_min else x_min + 1
    y_step = _nice_step(y_max if y_max > 0 else 1.0)
    y_top = y_step * math.ceil((y_max if y_max > 0 else 1.0) / y_step)
    pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def px(x):
        return MARGIN_LEFT + (x - x_min) / (x_max - x_min) * pw

    def py(y):
        return MARGIN_TOP + ph - min(max(y, 0.0), y_top) / y_top * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        out.append(f'<text x="{WIDTH // 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>')
    # axes and grid
    x0, y0 = MARGIN_LEFT, MARGIN_TOP + ph
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="black"/>')
    n_y = int(round(y_top / y_step))
    for k in range(n_y + 1):
        v = k * y_step
        y = py(v)
        out.append(f'<line x1="{x0}" y1="{_fmt(y)}" x2="{x0 + pw}" y2="{_fmt(y)}" stroke="#dddddd"/>')
        out.append(f'<text x="{x0 - 6}" y="{_fmt(y + 4)}" text-anchor="end">{v:.3g}</text>')
    x_step = _nice_step(x_max - x_min)
    v = math.ceil(x_min / x_step) * x_step
    while v <= x_max + 1e-9:
        x = px(v)
        out.append(f'<line x1="{_fmt(x)}" y1="{y0}" x2="{_fmt(x)}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{y0 + 18}" text-anchor="middle">{v:g}</text>')
        v += x_step
    out.append(f'<text x="{x0 + pw // 2}" y="{HEIGHT - 15}" text-anchor="middle">epoch</text>')
    out.append(f'<text x="18" y="{MARGIN_TOP + ph // 2}" text-anchor="middle" '
               f'transform="rotate(-90 18 {MARGIN_TOP + ph // 2})">{escape(metric)}</text>')
    # curves and legend
    for i, (label, xs, ys) in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = MARGIN_TOP + 10 + 20 * i
        lx = WIDTH - MARGIN_RIGHT + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics(paths: Sequence[str | Path], metric: str = "map", title: str = "") -> str:
    """Read each metrics CSV and chart ``metric`` against epoch.

    Legend labels are the file names without the ``.csv`` suffix.
    """
    curves = []
    for path in paths:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise PlotError(f"{path}: cannot read: {exc.strerror}") from None
        xs, ys = read_curve(text, str(path), metric)
        curves.append((path.stem, xs, ys))
    return render_svg(curves, metric, title)


__all__ = ["HEIGHT", "PlotError", "WIDTH", "plot_metrics", "read_curve", "render_svg"]
