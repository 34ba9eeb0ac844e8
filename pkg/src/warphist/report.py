"""Static SVG charts for result tables."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

_W, _H = 640, 360
_PAD_L, _PAD_R, _PAD_T, _PAD_B = 70, 20, 40, 90
_COLORS = ("#4472c4", "#ed7d31", "#70ad47", "#ffc000", "#5b9bd5", "#a5a5a5")


def _frame(title: str, body: list, y_label: str) -> str:
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{_W / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<text x="16" y="{_H / 2}" transform="rotate(-90 16 {_H / 2})" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{escape(y_label)}</text>',
        *body,
        "</svg>",
    ]) + "\n"


def _axes(vmin: float, vmax: float):
    x0, x1 = _PAD_L, _W - _PAD_R
    y0, y1 = _H - _PAD_B, _PAD_T
    span = (vmax - vmin) or 1.0

    def ymap(v):
        return y0 - (v - vmin) / span * (y0 - y1)

    body = [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']
    for i in range(5):
        v = vmin + span * i / 4
        y = ymap(v)
        body.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        body.append(f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                    f'font-size="10">{v:.3g}</text>')
    return body, ymap, (x0, x1, y0)


def bar_chart(labels, values, title: str, y_label: str = "") -> str:
    vals = [0.0 if v is None else float(v) for v in values]
    vmin = min(0.0, min(vals, default=0.0))
    vmax = max(vals, default=1.0)
    body, ymap, (x0, x1, y0) = _axes(vmin, vmax if vmax > vmin else vmin + 1)
    n = max(1, len(vals))
    slot = (x1 - x0) / n
    for i, (lab, v) in enumerate(zip(labels, vals)):
        x = x0 + i * slot + slot * 0.15
        top, base = ymap(max(v, 0)), ymap(min(v, 0))
        body.append(f'<rect x="{x:.1f}" y="{top:.1f}" width="{slot * 0.7:.1f}" height="{base - top:.1f}" '
                    f'fill="{_COLORS[i % len(_COLORS)]}"/>')
        cx = x + slot * 0.35
        body.append(f'<text x="{cx:.1f}" y="{y0 + 14}" transform="rotate(30 {cx:.1f} {y0 + 14})" '
                    f'font-family="sans-serif" font-size="10">{escape(str(lab))}</text>')
    return _frame(title, body, y_label)


def line_chart(xs, ys, title: str, y_label: str = "") -> str:
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    body, ymap, (x0, x1, y0) = _axes(min(ys, default=0.0), max(ys, default=1.0))
    if xs:
        xmin, xmax = xs[0], xs[-1]
        xspan = (xmax - xmin) or 1.0
        pts = " ".join(f"{x0 + (x - xmin) / xspan * (x1 - x0):.1f},{ymap(y):.1f}" for x, y in zip(xs, ys))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{_COLORS[0]}" stroke-width="1.5"/>')
        body.append(f'<text x="{x1}" y="{y0 + 30}" text-anchor="end" font-family="sans-serif" '
                    f'font-size="10">{xmax:g}</text>')
    return _frame(title, body, y_label)


def write_svg(path, svg: str) -> None:
    Path(path).write_text(svg, encoding="utf-8")
