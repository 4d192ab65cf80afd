"""Dependency-free SVG charts with deterministic output."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=60, right=130, top=40, bottom=50)


def _num(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str, xlabel: str, ylabel: str) -> list:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<text x="{(MARGIN["left"] + WIDTH - MARGIN["right"]) / 2}" y="{HEIGHT - 12}" '
        f'text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {HEIGHT / 2})">{escape(ylabel)}</text>',
    ]


def _axes(x_range, y_range, n_ticks: int = 5) -> tuple[list, callable, callable]:
    x0, x1 = x_range
    y0, y1 = y_range
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    left, right = MARGIN["left"], WIDTH - MARGIN["right"]
    top, bottom = MARGIN["top"], HEIGHT - MARGIN["bottom"]

    def sx(x):
        return left + (x - x0) / (x1 - x0) * (right - left)

    def sy(y):
        return bottom - (y - y0) / (y1 - y0) * (bottom - top)

    out = [f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>']
    for v in np.linspace(y0, y1, n_ticks):
        y = sy(v)
        out.append(f'<line x1="{left - 4}" y1="{_num(y)}" x2="{right}" y2="{_num(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 7}" y="{_num(y + 4)}" text-anchor="end">{v:.3g}</text>')
    return out, sx, sy


def _legend(names, colours) -> list:
    out = []
    x = WIDTH - MARGIN["right"] + 12
    for i, (name, colour) in enumerate(zip(names, colours)):
        y = MARGIN["top"] + 10 + 20 * i
        out.append(f'<rect x="{x}" y="{y - 9}" width="14" height="10" fill="{colour}"/>')
        out.append(f'<text x="{x + 20}" y="{y}">{escape(name)}</text>')
    return out


def line_chart(series: dict, title: str, xlabel: str, ylabel: str, y_range=None) -> str:
    """``series`` maps a label to ``(xs, ys)``; one polyline per label, in insertion order.

    An empty ``series`` draws the axes alone.
    """
    xs_all = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()] or [[0.0, 1.0]])
    if y_range is None:
        ys_all = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()] or [[0.0, 1.0]])
        y_range = (float(np.nanmin(ys_all)), float(np.nanmax(ys_all)))
    out = _frame(title, xlabel, ylabel)
    axes, sx, sy = _axes((float(xs_all.min()), float(xs_all.max())), y_range)
    out += axes
    for v in np.linspace(xs_all.min(), xs_all.max(), 6):
        out.append(f'<text x="{_num(sx(v))}" y="{HEIGHT - MARGIN["bottom"] + 16}" '
                   f'text-anchor="middle">{v:.4g}</text>')
    colours = [PALETTE[i % len(PALETTE)] for i in range(len(series))]
    for (name, (xs, ys)), colour in zip(series.items(), colours):
        pts = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in zip(xs, ys) if np.isfinite(y))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2">'
                   f'<title>{escape(name)}</title></polyline>')
    out += _legend(list(series), colours)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(values: dict, errors: dict | None, title: str, ylabel: str) -> str:
    """One bar per label with an optional symmetric error whisker."""
    errors = errors or {}
    top = max([v + errors.get(k, 0.0) for k, v in values.items()], default=1.0)
    bottom = min([0.0, *values.values()])
    out = _frame(title, "", ylabel)
    axes, _, sy = _axes((0, 1), (bottom, top if top > bottom else bottom + 1))
    out += axes
    left, right = MARGIN["left"], WIDTH - MARGIN["right"]
    slot = (right - left) / max(len(values), 1)
    for i, (name, v) in enumerate(values.items()):
        colour = PALETTE[i % len(PALETTE)]
        x = left + slot * (i + 0.2)
        y, y0 = sy(v), sy(0.0)
        out.append(f'<rect x="{_num(x)}" y="{_num(min(y, y0))}" width="{_num(slot * 0.6)}" '
                   f'height="{_num(abs(y0 - y))}" fill="{colour}"><title>{escape(name)}: {v:.4g}</title></rect>')
        e = errors.get(name)
        if e:
            cx = x + slot * 0.3
            out.append(f'<line x1="{_num(cx)}" y1="{_num(sy(v - e))}" x2="{_num(cx)}" '
                       f'y2="{_num(sy(v + e))}" stroke="black"/>')
        out.append(f'<text x="{_num(x + slot * 0.3)}" y="{HEIGHT - MARGIN["bottom"] + 16}" '
                   f'text-anchor="middle">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
