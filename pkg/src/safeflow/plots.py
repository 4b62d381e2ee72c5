"""SVG plot-data export: trajectories, learned boundary, cost-to-go contours.

SVG is written directly (no plotting dependency) so outputs are diff-able;
each figure also gets a sibling JSON file with the raw polyline data. Contours
are traced with a small marching-squares implementation.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.interpolate import griddata

from .env import Circle, Environment, Rect

_CASE_EDGES = {
    1: [("left", "bottom")],
    2: [("bottom", "right")],
    3: [("left", "right")],
    4: [("right", "top")],
    6: [("bottom", "top")],
    7: [("left", "top")],
    8: [("top", "left")],
    9: [("bottom", "top")],
    11: [("right", "top")],
    12: [("left", "right")],
    13: [("bottom", "right")],
    14: [("left", "bottom")],
}


def marching_squares(values: np.ndarray, xs: np.ndarray, ys: np.ndarray, level: float):
    """Trace the iso-contour {value = level} on a rectilinear grid.

    values has shape (len(xs), len(ys)); returns a list of (k, 2) polylines.
    """
    V = np.asarray(values, dtype=float)
    above = V > level
    segments = []
    for i in range(V.shape[0] - 1):
        for j in range(V.shape[1] - 1):
            c0, c1 = above[i, j], above[i + 1, j]
            c2, c3 = above[i + 1, j + 1], above[i, j + 1]
            case = c0 | c1 << 1 | c2 << 2 | c3 << 3
            if case in (0, 15):
                continue
            corners = {
                "bottom": ((xs[i], ys[j], V[i, j]), (xs[i + 1], ys[j], V[i + 1, j])),
                "right": ((xs[i + 1], ys[j], V[i + 1, j]), (xs[i + 1], ys[j + 1], V[i + 1, j + 1])),
                "top": ((xs[i + 1], ys[j + 1], V[i + 1, j + 1]), (xs[i], ys[j + 1], V[i, j + 1])),
                "left": ((xs[i], ys[j + 1], V[i, j + 1]), (xs[i], ys[j], V[i, j])),
            }

            def cross(edge):
                (xa, ya, va), (xb, yb, vb) = corners[edge]
                t = 0.5 if vb == va else (level - va) / (vb - va)
                t = min(max(t, 0.0), 1.0)
                return (xa + t * (xb - xa), ya + t * (yb - ya))

            if case in (5, 10):  # saddle: disambiguate with the cell center
                center_above = 0.25 * (V[i, j] + V[i + 1, j] + V[i + 1, j + 1] + V[i, j + 1]) > level
                if case == 5:
                    pairs = [("left", "top"), ("bottom", "right")] if center_above else [
                        ("left", "bottom"), ("top", "right")]
                else:
                    pairs = [("left", "bottom"), ("top", "right")] if center_above else [
                        ("left", "top"), ("bottom", "right")]
            else:
                pairs = _CASE_EDGES[case]
            for e1, e2 in pairs:
                segments.append((cross(e1), cross(e2)))
    return _chain_segments(segments)


def _key(p):
    return (round(p[0], 9), round(p[1], 9))


def _chain_segments(segments):
    """Join shared endpoints into polylines (greedy walk)."""
    adj = {}
    for si, (a, b) in enumerate(segments):
        adj.setdefault(_key(a), []).append((si, b))
        adj.setdefault(_key(b), []).append((si, a))
    used = set()
    lines = []
    for si, (a, b) in enumerate(segments):
        if si in used:
            continue
        used.add(si)
        line = [a, b]
        for endpoint, append in ((b, True), (a, False)):
            cur = endpoint
            while True:
                nxt = next(((sj, q) for sj, q in adj.get(_key(cur), []) if sj not in used), None)
                if nxt is None:
                    break
                used.add(nxt[0])
                cur = nxt[1]
                if append:
                    line.append(cur)
                else:
                    line.insert(0, cur)
        lines.append(np.asarray(line))
    return lines


# -- SVG ----------------------------------------------------------------------


class SvgCanvas:
    """World-coordinate SVG writer with a y-flip, fixed pixel width."""

    def __init__(self, lo, hi, width=640):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        span = self.hi - self.lo
        self.scale = width / span[0]
        self.w = width
        self.h = span[1] * self.scale
        self.elements = []

    def _pt(self, p):
        x = (p[0] - self.lo[0]) * self.scale
        y = self.h - (p[1] - self.lo[1]) * self.scale
        return f"{x:.2f},{y:.2f}"

    def polyline(self, pts, color="#1f77b4", width=1.5, dashed=False):
        if len(pts) < 2:
            return
        d = " ".join(self._pt(p) for p in pts)
        dash = ' stroke-dasharray="6 4"' if dashed else ""
        self.elements.append(
            f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="{width}"{dash}/>'
        )

    def circle(self, center, radius, color="#444", fill="none"):
        c = self._pt(center)
        x, y = c.split(",")
        self.elements.append(
            f'<circle cx="{x}" cy="{y}" r="{radius * self.scale:.2f}" '
            f'stroke="{color}" fill="{fill}"/>'
        )

    def rect(self, lo, hi, color="#444", fill="none"):
        a = self._pt((lo[0], hi[1]))
        x, y = a.split(",")
        w = (hi[0] - lo[0]) * self.scale
        h = (hi[1] - lo[1]) * self.scale
        self.elements.append(
            f'<rect x="{x}" y="{y}" width="{w:.2f}" height="{h:.2f}" '
            f'stroke="{color}" fill="{fill}"/>'
        )

    def marker(self, p, color="#d62728", radius=4.0):
        c = self._pt(p)
        x, y = c.split(",")
        self.elements.append(f'<circle cx="{x}" cy="{y}" r="{radius}" fill="{color}"/>')

    def write(self, path):
        body = "\n".join(self.elements)
        with open(path, "w") as fh:
            fh.write(
                f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w:.0f}" '
                f'height="{self.h:.0f}" viewBox="0 0 {self.w:.0f} {self.h:.0f}">\n'
                f"{body}\n</svg>\n"
            )


def draw_environment(canvas: SvgCanvas, env: Environment):
    canvas.rect(env.lo, env.hi, color="#000")
    for ob in env.obstacles:
        if isinstance(ob, Rect):
            canvas.rect(ob.lo, ob.hi, color="#333", fill="#bbb")
        elif isinstance(ob, Circle):
            canvas.circle(ob.center, ob.radius, color="#333", fill="#bbb")


def _dump_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh)


def export_trajectories(path_svg, env: Environment, trajectories, goals=None):
    """One polyline per trajectory over the environment."""
    canvas = SvgCanvas(env.lo, env.hi)
    draw_environment(canvas, env)
    data = []
    for traj in trajectories:
        canvas.polyline(traj.states, color="#1f77b4")
        data.append(traj.states.tolist())
    for g in goals if goals is not None else []:
        canvas.marker(g)
    canvas.write(path_svg)
    _dump_json(str(path_svg).rsplit(".", 1)[0] + ".json", {"trajectories": data})
    return canvas


def learned_boundary(m, lo, hi, grid_n=256):
    """Polylines of the learned set boundary {|g(x)| = 1}."""
    xs = np.linspace(lo[0], hi[0], grid_n)
    ys = np.linspace(lo[1], hi[1], grid_n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    zn = np.linalg.norm(m.forward(pts), axis=1).reshape(grid_n, grid_n)
    return marching_squares(zn, xs, ys, 1.0)


def export_boundary(path_svg, env: Environment, m, grid_n=256):
    """Learned boundary traced by marching squares over the inflated workspace."""
    margin = env.boundary_margin
    lo, hi = env.lo - margin, env.hi + margin
    lines = learned_boundary(m, lo, hi, grid_n)
    canvas = SvgCanvas(lo, hi)
    draw_environment(canvas, env)
    for line in lines:
        canvas.polyline(line, color="#d62728", width=2.0)
    canvas.write(path_svg)
    _dump_json(
        str(path_svg).rsplit(".", 1)[0] + ".json",
        {"boundary": [ln.tolist() for ln in lines]},
    )
    return lines


def export_cost_contours(path_svg, env: Environment, points, labels, n_levels=10, grid_n=128):
    """Contour lines of the cost-to-go labels, gridded from scattered samples."""
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels, dtype=float)
    xs = np.linspace(env.lo[0], env.hi[0], grid_n)
    ys = np.linspace(env.lo[1], env.hi[1], grid_n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    V = griddata(points, labels, (gx, gy), method="linear")
    V = np.where(np.isfinite(V), V, np.nanmax(labels) * 2)
    levels = np.linspace(labels.min(), labels.max(), n_levels + 2)[1:-1]
    canvas = SvgCanvas(env.lo, env.hi)
    draw_environment(canvas, env)
    data = {}
    for lv in levels:
        lines = marching_squares(V, xs, ys, float(lv))
        data[f"{lv:.4f}"] = [ln.tolist() for ln in lines]
        for line in lines:
            canvas.polyline(line, color="#2ca02c", width=1.0)
    canvas.write(path_svg)
    _dump_json(str(path_svg).rsplit(".", 1)[0] + ".json", {"levels": data})
    return data


def export_z_space(path_svg, m, trajectories):
    """Trajectories transformed to Z-space, with the unit circle."""
    canvas = SvgCanvas((-1.3, -1.3), (1.3, 1.3))
    canvas.circle((0.0, 0.0), 1.0, color="#d62728")
    data = []
    for traj in trajectories:
        Z = m.forward(traj.states)
        canvas.polyline(Z, color="#1f77b4")
        data.append(Z.tolist())
    canvas.write(path_svg)
    _dump_json(str(path_svg).rsplit(".", 1)[0] + ".json", {"z_trajectories": data})
    return canvas
