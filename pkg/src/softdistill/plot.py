"""Deterministic SVG line plots from metrics or sweep CSV files.

The output is a pure function of the input bytes: no timestamps, no random
ids, fixed number formatting. That keeps plots diffable.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 30, 50


class PlotError(ValueError):
    """The CSV cannot be plotted as requested."""


def _tick(v: float) -> str:
    return f"{v:.4g}"


def render_svg(text: str, series_key: str, x: str = "epoch", y: str = "train_loss") -> str:
    """One polyline per distinct value of ``series_key``, in order of first appearance."""
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    rows = list(reader)
    for col in (series_key, x, y):
        if col not in header:
            raise PlotError(f"missing column {col!r}")
    if not rows:
        raise PlotError("CSV has no data rows")

    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        try:
            pt = (float(r[x]), float(r[y]))
        except ValueError:
            raise PlotError(f"non-numeric value in columns {x!r}/{y!r}") from None
        series.setdefault(r[series_key], []).append(pt)

    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return TOP + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
        f'<text x="{LEFT}" y="{TOP + ph + 16}" text-anchor="middle">{_tick(x0)}</text>',
        f'<text x="{LEFT + pw}" y="{TOP + ph + 16}" text-anchor="middle">{_tick(x1)}</text>',
        f'<text x="{LEFT - 6}" y="{TOP + ph}" text-anchor="end">{_tick(y0)}</text>',
        f'<text x="{LEFT - 6}" y="{TOP + 4}" text-anchor="end">{_tick(y1)}</text>',
        f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x)}</text>',
        f'<text x="16" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {TOP + ph / 2:.2f})">{escape(y)}</text>',
    ]
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in pts)
        out.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'data-series={quoteattr(name)} points="{coords}"/>'
        )
        ly = TOP + 14 + 18 * i
        lx = LEFT + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(series_key)}={escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(csv_path, series_key: str, output_svg, x: str = "epoch", y: str = "train_loss") -> Path:
    path = Path(csv_path)
    if not path.exists():
        raise PlotError(f"CSV not found: {path}")
    svg = render_svg(path.read_text(), series_key, x, y)
    output_svg = Path(output_svg)
    output_svg.write_text(svg)
    return output_svg
