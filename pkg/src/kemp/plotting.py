"""Deterministic SVG overlays of a scenario and its predicted modes.

Roads are gray, observed histories dark, the ground-truth future magenta
and predicted modes blue with opacity proportional to probability
(relative to the most likely mode).  Keyframes are drawn as yellow stars.
Every number is printed with a fixed precision so identical inputs give
identical bytes.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from typing import Iterable

import numpy as np

from .scene import PredictionSet, Scenario, write_jsonl

ROAD_COLOR = "#9e9e9e"
HISTORY_COLOR = "#222222"
NEIGHBOR_COLOR = "#555555"
TRUTH_COLOR = "#d81b9c"
MODE_COLOR = "#1f5fd6"
KEYFRAME_COLOR = "#ffd21f"
_NICE_LENGTHS = (1, 2, 5, 10, 20, 50, 100, 200, 500)


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


class _Canvas:
    """World meters to SVG pixels, y pointing up in the world."""

    def __init__(self, points: np.ndarray, width: int, margin: int):
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        span = np.maximum(hi - lo, 1.0)
        self.scale = (width - 2 * margin) / float(span.max())
        self.lo, self.hi = lo, lo + span
        self.margin = margin
        self.width = width
        self.height = int(math.ceil(2 * margin + span[1] * self.scale)) + 40

    def xy(self, p) -> tuple[float, float]:
        x = self.margin + (p[0] - self.lo[0]) * self.scale
        y = self.margin + (self.hi[1] - p[1]) * self.scale
        return x, y

    def points_attr(self, pts: Iterable) -> str:
        return " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in (self.xy(p) for p in pts))


def _star(cx: float, cy: float, r_out: float = 6.0, r_in: float = 2.6) -> str:
    pts = []
    for i in range(10):
        r = r_out if i % 2 == 0 else r_in
        a = -math.pi / 2 + i * math.pi / 5
        pts.append(f"{_fmt(cx + r * math.cos(a))},{_fmt(cy + r * math.sin(a))}")
    return " ".join(pts)


def _polyline(parent, cls: str, points: str, color: str, width: float, opacity: float | None = None, dash: str | None = None):
    attrs = {"class": cls, "points": points, "fill": "none", "stroke": color, "stroke-width": _fmt(width)}
    if opacity is not None:
        attrs["stroke-opacity"] = f"{opacity:.4f}"
    if dash:
        attrs["stroke-dasharray"] = dash
    return ET.SubElement(parent, "polyline", attrs)


def render_svg(scenario: Scenario, prediction: PredictionSet | None = None, width: int = 640, margin: int = 30) -> str:
    """SVG document text for one scenario and (optionally) its prediction set."""
    if prediction is not None and prediction.scenario_id != scenario.scenario_id:
        raise ValueError(f"prediction is for {prediction.scenario_id!r}, not {scenario.scenario_id!r}")
    target = scenario.target
    hist = target.past_states[target.past_states[:, 5] > 0, :2]
    truth = scenario.ground_truth
    clouds = [hist, truth] + [r.points for r in scenario.roads]
    if prediction is not None:
        clouds += [m.mu for m in prediction.modes]
    canvas = _Canvas(np.vstack(clouds), width, margin)

    svg = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(canvas.width),
        "height": str(canvas.height),
        "viewBox": f"0 0 {canvas.width} {canvas.height}",
    })
    ET.SubElement(svg, "title").text = scenario.scenario_id
    ET.SubElement(svg, "rect", {"width": "100%", "height": "100%", "fill": "white"})

    roads = ET.SubElement(svg, "g", {"id": "roads"})
    for r in scenario.roads:
        dash = "4,3" if r.kind == "boundary" else None
        _polyline(roads, f"road {r.kind}", canvas.points_attr(r.points), ROAD_COLOR, 1.2, dash=dash)

    agents = ET.SubElement(svg, "g", {"id": "history"})
    for a in scenario.neighbors:
        pts = a.past_states[a.past_states[:, 5] > 0, :2]
        if len(pts) >= 2:
            _polyline(agents, "neighbor-history", canvas.points_attr(pts), NEIGHBOR_COLOR, 1.5)
    _polyline(agents, "history", canvas.points_attr(hist), HISTORY_COLOR, 2.5)

    modes = ET.SubElement(svg, "g", {"id": "predictions"})
    stars = ET.SubElement(svg, "g", {"id": "keyframes"})
    if prediction is not None and prediction.modes:
        top = float(prediction.probabilities.max())
        anchor = hist[-1]
        for m in prediction.modes:
            opacity = m.probability / top if top > 0 else 1.0
            pts = np.vstack([anchor[None], m.mu])
            _polyline(modes, "mode", canvas.points_attr(pts), MODE_COLOR, 2.0, opacity=opacity)
            for kp in m.keyframe_mu:
                cx, cy = canvas.xy(kp)
                ET.SubElement(stars, "polygon", {
                    "class": "keyframe", "points": _star(cx, cy), "fill": KEYFRAME_COLOR,
                    "stroke": "#7a5c00", "stroke-width": "0.60",
                })

    gt = ET.SubElement(svg, "g", {"id": "ground-truth"})
    _polyline(gt, "ground-truth", canvas.points_attr(np.vstack([hist[-1:], truth])), TRUTH_COLOR, 2.0)

    _legend(svg, canvas)
    _scale_bar(svg, canvas)
    ET.indent(svg)
    return ET.tostring(svg, encoding="unicode")


def _legend(svg, canvas: _Canvas) -> None:
    g = ET.SubElement(svg, "g", {"id": "legend", "font-family": "sans-serif", "font-size": "11"})
    entries = [("road", ROAD_COLOR), ("history", HISTORY_COLOR), ("ground truth", TRUTH_COLOR),
               ("prediction", MODE_COLOR)]
    x0, y0 = 8.0, 14.0
    for i, (label, color) in enumerate(entries):
        y = y0 + 14 * i
        ET.SubElement(g, "line", {"x1": _fmt(x0), "y1": _fmt(y), "x2": _fmt(x0 + 18), "y2": _fmt(y),
                                  "stroke": color, "stroke-width": "2.00"})
        ET.SubElement(g, "text", {"x": _fmt(x0 + 24), "y": _fmt(y + 4)}).text = label
    y = y0 + 14 * len(entries)
    ET.SubElement(g, "polygon", {"points": _star(x0 + 9, y, 5.0, 2.2), "fill": KEYFRAME_COLOR})
    ET.SubElement(g, "text", {"x": _fmt(x0 + 24), "y": _fmt(y + 4)}).text = "keyframe"


def _scale_bar(svg, canvas: _Canvas) -> None:
    target_px = (canvas.width - 2 * canvas.margin) / 5
    meters = min(_NICE_LENGTHS, key=lambda m: abs(m * canvas.scale - target_px))
    length = meters * canvas.scale
    x0 = canvas.margin
    y = canvas.height - 16
    g = ET.SubElement(svg, "g", {"id": "scale-bar", "font-family": "sans-serif", "font-size": "11"})
    ET.SubElement(g, "line", {"x1": _fmt(x0), "y1": _fmt(y), "x2": _fmt(x0 + length), "y2": _fmt(y),
                              "stroke": "black", "stroke-width": "2.00"})
    ET.SubElement(g, "text", {"x": _fmt(x0 + length + 6), "y": _fmt(y + 4)}).text = f"{meters} m"


def write_svg(path, scenario: Scenario, prediction: PredictionSet | None = None) -> None:
    write_jsonl(path, [render_svg(scenario, prediction)])
