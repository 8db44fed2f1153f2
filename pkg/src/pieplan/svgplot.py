"""Self-contained SVG rendering for loss curves, score histograms, and
bird's-eye scenario snapshots. No plotting dependency; output is plain
text and diffs cleanly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class Svg:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.parts: list[str] = []

    def rect(self, x, y, w, h, fill="none", stroke="black", width=1.0, opacity=1.0):
        self.parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" '
            f'fill="{fill}" stroke="{stroke}" stroke-width="{width}" '
            f'opacity="{opacity}"/>')

    def polyline(self, pts, stroke="black", width=1.5, dash=None, opacity=1.0):
        d = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<polyline points="{d}" fill="none" stroke="{stroke}" '
            f'stroke-width="{width}" opacity="{opacity}"{extra}/>')

    def polygon(self, pts, fill="#eeeeee", stroke="#888888", width=1.0, opacity=1.0):
        d = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        self.parts.append(
            f'<polygon points="{d}" fill="{fill}" stroke="{stroke}" '
            f'stroke-width="{width}" opacity="{opacity}"/>')

    def circle(self, x, y, r, fill="black"):
        self.parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="{fill}"/>')

    def text(self, x, y, s, size=11, anchor="start", fill="#222222"):
        self.parts.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" '
            f'font-family="monospace" text-anchor="{anchor}" fill="{fill}">{s}</text>')

    def save(self, path) -> None:
        body = "\n".join(self.parts)
        Path(path).write_text(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n')


def _axes(svg: Svg, x0, y0, x1, y1, n_ticks=5):
    svg.polyline([(x0, y0), (x0, y1), (x1, y1)], stroke="#444444", width=1.0)
    return


def plot_loss_curves(metrics_path, out_path) -> None:
    """Training loss (and validation score when present) from the metrics log."""
    epochs, losses, val_e, val_p = [], [], [], []
    for raw in Path(metrics_path).read_text().splitlines():
        if not raw.strip():
            continue
        rec = json.loads(raw)
        epochs.append(rec["epoch"])
        losses.append(rec["train_loss"])
        if rec.get("val_pdms") is not None:
            val_e.append(rec["epoch"])
            val_p.append(rec["val_pdms"])
    if not epochs:
        raise ValueError(f"{metrics_path}: no epoch records")

    w, h, m = 640, 360, 50
    svg = Svg(w, h)
    lo, hi = min(losses), max(losses)
    span = (hi - lo) or 1.0
    emax = max(epochs) or 1

    def px(e):
        return m + (w - 2 * m) * e / emax

    def py(v):
        return h - m - (h - 2 * m) * (v - lo) / span

    _axes(svg, m, m, w - m, h - m)
    svg.polyline([(px(e), py(v)) for e, v in zip(epochs, losses)], stroke="#c0392b")
    svg.text(m, m - 14, f"train loss by epoch (min {lo:.4f}, max {hi:.4f})")
    svg.text(m, h - m + 26, "0", size=10)
    svg.text(w - m, h - m + 26, str(emax), size=10, anchor="end")
    if val_p:
        def pv(v):
            return h - m - (h - 2 * m) * v
        svg.polyline([(px(e), pv(v)) for e, v in zip(val_e, val_p)],
                     stroke="#2471a3", dash="4,3")
        svg.text(w - m, m - 14, "validation score (0..1, dashed)", anchor="end", size=10)
    svg.save(out_path)


def plot_score_histogram(csv_path, out_path, column: str = "pdms", bins: int = 20) -> None:
    rows = Path(csv_path).read_text().strip().splitlines()
    header = rows[0].split(",")
    idx = header.index(column)
    vals = np.array([float(r.split(",")[idx]) for r in rows[1:]])
    hist, edges = np.histogram(vals, bins=bins, range=(0.0, 1.0))

    w, h, m = 640, 360, 50
    svg = Svg(w, h)
    top = max(int(hist.max()), 1)
    bw = (w - 2 * m) / bins
    for i, count in enumerate(hist):
        bh = (h - 2 * m) * count / top
        svg.rect(m + i * bw, h - m - bh, bw - 1.5, bh, fill="#2e86c1", stroke="none")
    _axes(svg, m, m, w - m, h - m)
    svg.text(m, m - 14, f"{column} over {len(vals)} scenarios "
                        f"(mean {vals.mean():.3f})")
    svg.text(m, h - m + 26, "0.0", size=10)
    svg.text(w - m, h - m + 26, "1.0", size=10, anchor="end")
    svg.save(out_path)


def plot_bev(scenario, out_path, planned: Optional[np.ndarray] = None,
             anchors: Optional[Sequence] = None) -> None:
    """Top-down snapshot: road, agents, expert vs planned trajectory, and
    optionally the anchor set offered to the planner."""
    drivable = np.asarray(scenario.drivable)
    all_pts = [drivable, np.asarray(scenario.route), scenario.expert.xy]
    if planned is not None:
        all_pts.append(np.asarray(planned)[:, :2])
    pts = np.concatenate(all_pts)
    lo = pts.min(axis=0) - 4
    hi = pts.max(axis=0) + 4

    w, h = 640, 640
    scale = min((w - 20) / (hi[0] - lo[0]), (h - 20) / (hi[1] - lo[1]))

    def to_px(p):
        # y up in world, y down in svg
        return (10 + (p[0] - lo[0]) * scale, h - 10 - (p[1] - lo[1]) * scale)

    svg = Svg(w, h)
    svg.polygon([to_px(p) for p in drivable], fill="#f2f2f2", stroke="#999999")
    svg.polyline([to_px(p) for p in scenario.route], stroke="#bbbbbb",
                 width=1.0, dash="6,4")

    if scenario.stop_line is not None:
        color = "#c0392b" if scenario.light_state == "red" else "#27ae60"
        svg.polyline([to_px(p) for p in scenario.stop_line], stroke=color, width=3.0)

    from .geometry import box_corners
    for a in scenario.agents:
        corners = box_corners(a.center, a.extent, a.heading)
        svg.polygon([to_px(p) for p in corners], fill="#d5dbdb", stroke="#5d6d7e")
        tip = a.center + a.velocity
        svg.polyline([to_px(a.center), to_px(tip)], stroke="#5d6d7e", width=1.0)

    ego_corners = box_corners(np.array([1.4, 0.0]), np.array([4.0, 1.85]), 0.0)
    svg.polygon([to_px(p) for p in ego_corners], fill="#aed6f1", stroke="#21618c")

    if anchors:
        for anchor in anchors:
            svg.polyline([to_px(p) for p in anchor.xy], stroke="#d7bde2",
                         width=1.0, opacity=0.8)

    svg.polyline([to_px(p) for p in scenario.expert.xy], stroke="#27ae60", width=2.5)
    for p in scenario.expert.xy:
        svg.circle(*to_px(p), r=2.2, fill="#27ae60")
    if planned is not None:
        planned = np.asarray(planned)
        svg.polyline([to_px(p) for p in planned[:, :2]], stroke="#c0392b", width=2.5)
        for p in planned[:, :2]:
            svg.circle(*to_px(p), r=2.2, fill="#c0392b")

    svg.text(12, 20, f"{scenario.id} cmd={scenario.command} "
                     f"(expert green, planned red)", size=12)
    svg.save(out_path)
