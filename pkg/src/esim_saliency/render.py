"""Dependency-free SVG heatmaps and gate-curve panels, plus CSV export.

Output is a pure function of its inputs: coordinates are formatted with a
fixed precision and elements are emitted in a fixed order, so identical
reports render to byte-identical files.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional
from xml.sax.saxutils import escape

from .checkpoint import atomic_write
from .introspect import AttentionMap, GateCurveSet

# rows of a panel, top to bottom: inference layer above input layer
PANEL_ROWS = (("inference", "input"), ("inference", "forget"), ("inference", "output"),
              ("input", "input"), ("input", "forget"), ("input", "output"))


@dataclass(frozen=True)
class RenderSpec:
    cell_size: int = 28
    font_size: int = 11
    high_color: tuple = (8, 69, 148)
    signal_color: str = "#969696"
    saliency_color: str = "#d94801"
    row_height: int = 70
    step_width: int = 46

    def __post_init__(self):
        if self.cell_size <= 0 or self.font_size <= 0 or self.row_height <= 0 or self.step_width <= 0:
            raise ValueError("sizes must be positive")


def ramp(value: float, high=(8, 69, 148)) -> str:
    """Monotone single-hue ramp: 0 -> white, 1 -> ``high``."""
    v = min(max(float(value), 0.0), 1.0)
    r, g, b = (round(255 + (h - 255) * v) for h in high)
    return f"#{r:02x}{g:02x}{b:02x}"


def _f(x: float) -> str:
    return f"{x:.2f}"


def _text(x, y, s, size, anchor="start", rotate=None, weight=None):
    attrs = f'x="{_f(x)}" y="{_f(y)}" font-size="{size}" text-anchor="{anchor}"'
    if weight:
        attrs += f' font-weight="{weight}"'
    if rotate is not None:
        attrs += f' transform="rotate({rotate} {_f(x)} {_f(y)})"'
    return f"<text {attrs}>{escape(str(s))}</text>"


def _label_width(tokens, font_size):
    return max((len(t) for t in tokens), default=1) * font_size * 0.62 + 8


def heatmap_svg(amap: AttentionMap, spec: RenderSpec = RenderSpec(), predicted_label: Optional[str] = None) -> str:
    """Premise tokens down the left, hypothesis tokens across the top."""
    n, m = amap.values.shape
    cs, fs = spec.cell_size, spec.font_size
    left = _label_width(amap.premise_tokens, fs)
    top = _label_width(amap.hypothesis_tokens, fs) + 2 * fs + 10
    width = left + m * cs + 20
    height = top + n * cs + (2 * fs if amap.degenerate else 0) + 20
    title = f"{amap.kind}" + (f" (predicted: {predicted_label})" if predicted_label else "")
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(width)} {_f(height)}" font-family="sans-serif">',
        '<rect width="100%" height="100%" fill="#ffffff"/>',
        _text(left, fs + 4, title, fs + 2, weight="bold"),
    ]
    for j, tok in enumerate(amap.hypothesis_tokens):
        x = left + j * cs + cs / 2
        out.append(_text(x, top - 6, tok, fs, rotate=-60))
    for i, tok in enumerate(amap.premise_tokens):
        out.append(_text(left - 6, top + i * cs + cs / 2 + fs / 3, tok, fs, anchor="end"))
    for i in range(n):
        for j in range(m):
            v = float(amap.values[i, j])
            out.append(f'<rect x="{_f(left + j * cs)}" y="{_f(top + i * cs)}" width="{cs}" height="{cs}" '
                       f'fill="{ramp(v, spec.high_color)}" stroke="#d9d9d9" stroke-width="0.5">'
                       f"<title>{escape(amap.premise_tokens[i] if i < len(amap.premise_tokens) else str(i))} / "
                       f"{escape(amap.hypothesis_tokens[j] if j < len(amap.hypothesis_tokens) else str(j))}: "
                       f"{v:.4f}</title></rect>")
    if amap.degenerate:
        out.append(_text(left, top + n * cs + fs + 8, "degenerate: all-zero saliency", fs))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def gate_panel_svg(curves: GateCurveSet, direction: str, spec: RenderSpec = RenderSpec(),
                   predicted_label: Optional[str] = None) -> str:
    """Six stacked rows (inference gates on top, input gates below) for one direction."""
    fs, rh, sw = spec.font_size, spec.row_height, spec.step_width
    tokens = curves.tokens
    length = max(len(tokens), 1)
    left = 130
    top = 2 * fs + 16
    plot_w = sw * length
    width = left + plot_w + 20
    bottom_labels = _label_width(tokens, fs)
    height = top + len(PANEL_ROWS) * rh + bottom_labels + 2 * fs + 10
    title = f"{curves.sentence} gates, {direction}" + (
        f" (predicted: {predicted_label})" if predicted_label else "")
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(width)} {_f(height)}" font-family="sans-serif">',
        '<rect width="100%" height="100%" fill="#ffffff"/>',
        _text(8, fs + 4, title, fs + 2, weight="bold"),
    ]
    pad = 8
    for r, (layer, gate) in enumerate(PANEL_ROWS):
        curve = curves.get(layer, direction, gate)
        y0 = top + r * rh
        out.append(f'<g class="row" data-layer="{layer}" data-gate="{gate}">')
        out.append(f'<rect x="{left}" y="{_f(y0)}" width="{_f(plot_w)}" height="{rh - 4}" '
                   'fill="none" stroke="#bdbdbd" stroke-width="0.5"/>')
        out.append(_text(left - 6, y0 + rh / 2, f"{layer} / {gate}", fs, anchor="end"))
        for name, values, color in (("signal", curve.signal, spec.signal_color),
                                    ("saliency", curve.saliency, spec.saliency_color)):
            pts = [(left + sw * t + sw / 2, y0 + pad + (1.0 - float(v)) * (rh - 4 - 2 * pad))
                   for t, v in enumerate(values)]
            if len(pts) > 1:
                coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
                out.append(f'<polyline class="{name}" points="{coords}" fill="none" stroke="{color}" '
                           'stroke-width="1.5"/>')
            for x, y in pts:
                out.append(f'<circle class="{name}" cx="{_f(x)}" cy="{_f(y)}" r="2.5" fill="{color}"/>')
        out.append("</g>")
    y_tok = top + len(PANEL_ROWS) * rh + 8
    for t, tok in enumerate(tokens):
        out.append(_text(left + sw * t + sw / 2, y_tok, tok, fs, anchor="end", rotate=-60))
    y_leg = height - fs
    out.append(f'<rect x="{left}" y="{_f(y_leg - fs + 2)}" width="10" height="10" fill="{spec.signal_color}"/>')
    out.append(_text(left + 14, y_leg, "signal norm", fs))
    out.append(f'<rect x="{left + 110}" y="{_f(y_leg - fs + 2)}" width="10" height="10" '
               f'fill="{spec.saliency_color}"/>')
    out.append(_text(left + 124, y_leg, "saliency norm", fs))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def map_csv(amap: AttentionMap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "premise_token", "hypothesis_token", "value"])
    n, m = amap.values.shape
    for i in range(n):
        for j in range(m):
            w.writerow([i, j, amap.premise_tokens[i], amap.hypothesis_tokens[j], repr(float(amap.values[i, j]))])
    return buf.getvalue()


def curves_csv(curves: GateCurveSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "direction", "gate", "t", "token", "signal", "saliency"])
    for c in curves.curves:
        for t, tok in enumerate(curves.tokens):
            w.writerow([c.layer, c.direction, c.gate, t, tok, repr(float(c.signal[t])),
                        repr(float(c.saliency[t]))])
    return buf.getvalue()


def render_heatmap(amap: AttentionMap, path, spec: RenderSpec = RenderSpec(),
                   predicted_label: Optional[str] = None):
    atomic_write(path, heatmap_svg(amap, spec, predicted_label).encode("utf-8"))
    return path


def render_gate_panel(curves: GateCurveSet, direction: str, path, spec: RenderSpec = RenderSpec(),
                      predicted_label: Optional[str] = None):
    atomic_write(path, gate_panel_svg(curves, direction, spec, predicted_label).encode("utf-8"))
    return path


def write_text(path, text: str):
    atomic_write(path, text.encode("utf-8"))
    return path
