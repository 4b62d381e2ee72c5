"""2D workspace with axis-aligned rectangle and circle obstacles.

The safe set is the closure of (workspace minus obstacle interiors): a point
exactly on an obstacle edge or on the workspace boundary counts as safe.
Connectivity of the safe set is validated on a 256x256 grid at construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FLOOD_FILL_RESOLUTION = 256
MAX_REJECTIONS = 10**6


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle obstacle, corners lo <= hi."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if not np.all(self.hi > self.lo):
            raise ValueError(f"degenerate rectangle: lo={self.lo}, hi={self.hi}")

    def contains_open(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts > self.lo) & (pts < self.hi), axis=-1)

    def to_dict(self) -> dict:
        return {"type": "rect", "min": self.lo.tolist(), "max": self.hi.tolist()}


@dataclass(frozen=True)
class Circle:
    """Circle obstacle."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ValueError(f"nonpositive radius {self.radius}")

    def contains_open(self, pts: np.ndarray) -> np.ndarray:
        d2 = np.sum((pts - self.center) ** 2, axis=-1)
        return d2 < self.radius**2

    def to_dict(self) -> dict:
        return {"type": "circle", "center": self.center.tolist(), "radius": self.radius}


def _obstacle_from_dict(d: dict):
    if d["type"] == "rect":
        return Rect(np.asarray(d["min"]), np.asarray(d["max"]))
    if d["type"] == "circle":
        return Circle(np.asarray(d["center"]), float(d["radius"]))
    raise ValueError(f"unknown obstacle type {d['type']!r}")


class Environment:
    """Workspace rectangle plus obstacles, with membership and collision queries.

    All queries are pure reads after construction; instances are safe to share.

    Parameters
    ----------
    workspace_min, workspace_max : array-like, shape (2,)
        Corners of the workspace rectangle.
    obstacles : sequence of Rect | Circle
    boundary_margin : float, optional
        Inflation used when sampling unsafe points outside the workspace.
        Defaults to 20% of the workspace diagonal.
    """

    def __init__(self, workspace_min, workspace_max, obstacles=(), boundary_margin=None):
        self.lo = np.asarray(workspace_min, dtype=float)
        self.hi = np.asarray(workspace_max, dtype=float)
        if self.lo.shape != (2,) or self.hi.shape != (2,):
            raise ValueError("workspace corners must be 2D points")
        if not np.all(self.hi > self.lo):
            raise ValueError("workspace has no area")
        self.obstacles = tuple(obstacles)
        diag = float(np.linalg.norm(self.hi - self.lo))
        self.boundary_margin = 0.2 * diag if boundary_margin is None else float(boundary_margin)
        if self.boundary_margin < 0:
            raise ValueError("boundary_margin must be nonnegative")

        for ob in self.obstacles:
            if not self._intersects_workspace(ob):
                raise ValueError(f"obstacle {ob} does not intersect the workspace")
        self._validate_connected()

    # -- construction checks ------------------------------------------------

    def _intersects_workspace(self, ob) -> bool:
        if isinstance(ob, Rect):
            return bool(np.all(ob.lo <= self.hi) and np.all(ob.hi >= self.lo))
        # circle: distance from center to workspace rectangle
        nearest = np.clip(ob.center, self.lo, self.hi)
        return float(np.linalg.norm(nearest - ob.center)) <= ob.radius

    def _validate_connected(self):
        n = FLOOD_FILL_RESOLUTION
        xs = np.linspace(self.lo[0], self.hi[0], n)
        ys = np.linspace(self.lo[1], self.hi[1], n)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        mask = self.is_safe(pts).reshape(n, n)
        if not mask.any():
            raise ValueError("safe set is empty on the validation grid")
        _, ncomp = ndimage.label(mask)  # 4-connectivity
        if ncomp != 1:
            raise ValueError(f"disconnected safe set ({ncomp} components on validation grid)")

    # -- queries ------------------------------------------------------------

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def is_safe(self, x) -> bool | np.ndarray:
        """True iff x is inside the workspace and outside every obstacle interior.

        Accepts a single point (2,) or a batch (B, 2); boundary points are safe.
        """
        pts = np.asarray(x, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        ok = np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)
        for ob in self.obstacles:
            ok &= ~ob.contains_open(pts)
        return bool(ok[0]) if single else ok

    def segment_free(self, a, b) -> bool:
        """True iff the closed segment [a, b] stays in the safe set.

        Checked analytically against the rectangle/circle primitives, not by
        sampling. A segment that only grazes an obstacle boundary is free.
        """
        A = np.atleast_2d(np.asarray(a, dtype=float))
        B = np.atleast_2d(np.asarray(b, dtype=float))
        return bool(self.segments_free(A, B)[0])

    def segments_free(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Vectorized segment_free for endpoint arrays of shape (M, 2)."""
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        free = np.all((A >= self.lo) & (A <= self.hi), axis=-1)
        free &= np.all((B >= self.lo) & (B <= self.hi), axis=-1)
        for ob in self.obstacles:
            if isinstance(ob, Rect):
                free &= ~_segments_hit_rect(A, B, ob.lo, ob.hi)
            else:
                free &= ~_segments_hit_circle(A, B, ob.center, ob.radius)
        return free

    # -- sampling -----------------------------------------------------------

    def sample_safe(self, count: int, seed) -> np.ndarray:
        """Rejection-sample `count` safe points in the workspace (fixed seed)."""
        return self._rejection_sample(count, seed, self.lo, self.hi, want_safe=True)

    def sample_unsafe(self, count: int, seed) -> np.ndarray:
        """Rejection-sample `count` unsafe points in the inflated workspace."""
        m = self.boundary_margin
        return self._rejection_sample(count, seed, self.lo - m, self.hi + m, want_safe=False)

    def _rejection_sample(self, count, seed, lo, hi, want_safe):
        if count < 1:
            raise ValueError("count must be >= 1")
        rng = np.random.default_rng(seed)
        out = np.empty((count, 2))
        got = 0
        consecutive = 0
        chunk = max(256, min(count * 4, 65536))
        while got < count:
            pts = rng.uniform(lo, hi, size=(chunk, 2))
            keep = self.is_safe(pts)
            if not want_safe:
                keep = ~keep
            idx = np.flatnonzero(keep)
            if idx.size == 0:
                consecutive += chunk
            else:
                consecutive = chunk - int(idx[-1]) - 1
                take = idx[: count - got]
                out[got : got + take.size] = pts[take]
                got += take.size
            if consecutive >= MAX_REJECTIONS:
                kind = "safe" if want_safe else "unsafe"
                raise RuntimeError(
                    f"sample_{kind}: {MAX_REJECTIONS} consecutive rejections "
                    "(degenerate geometry?)"
                )
        return out

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "workspace": {"min": self.lo.tolist(), "max": self.hi.tolist()},
            "obstacles": [ob.to_dict() for ob in self.obstacles],
            "boundary_margin": self.boundary_margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Environment":
        return cls(
            np.asarray(d["workspace"]["min"]),
            np.asarray(d["workspace"]["max"]),
            [_obstacle_from_dict(o) for o in d.get("obstacles", [])],
            d.get("boundary_margin"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "Environment":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _segments_hit_rect(A, B, lo, hi) -> np.ndarray:
    """Whether segments [A_i, B_i] intersect the open box (lo, hi).

    Liang-Barsky clipping with strict interval comparison so that segments
    touching only the box boundary (edge or corner) do not count as hits.
    """
    D = B - A
    t_enter = np.zeros(len(A))
    t_exit = np.ones(len(A))
    alive = np.ones(len(A), dtype=bool)
    for ax in range(2):
        d = D[:, ax]
        a = A[:, ax]
        par = d == 0.0
        # parallel segments must lie strictly inside the open slab
        alive &= ~par | ((a > lo[ax]) & (a < hi[ax]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo[ax] - a) / d
            t1 = (hi[ax] - a) / d
        swap = t0 > t1
        t0w = np.where(swap, t1, t0)
        t1w = np.where(swap, t0, t1)
        t_enter = np.where(par, t_enter, np.maximum(t_enter, t0w))
        t_exit = np.where(par, t_exit, np.minimum(t_exit, t1w))
    return alive & (t_enter < t_exit)


def _segments_hit_circle(A, B, center, radius) -> np.ndarray:
    """Whether segments come strictly closer than `radius` to `center`."""
    D = B - A
    AC = center - A
    dd = np.sum(D * D, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dd > 0, np.sum(AC * D, axis=-1) / dd, 0.0)
    t = np.clip(t, 0.0, 1.0)
    nearest = A + t[:, None] * D
    dist2 = np.sum((nearest - center) ** 2, axis=-1)
    return dist2 < radius**2


def make_corridor_env(workspace_min, workspace_max, obstacles=(), boundary_margin=None) -> Environment:
    """Build and validate an Environment from workspace extents and obstacles."""
    return Environment(workspace_min, workspace_max, obstacles, boundary_margin)


def corridor_v1() -> Environment:
    """Two-slab corridor preset: an S-shaped passage through a 5 x 3 workspace."""
    return Environment(
        (0.0, 0.0),
        (5.0, 3.0),
        [
            Rect((1.4, 0.0), (2.0, 1.9)),
            Rect((3.0, 1.1), (3.6, 3.0)),
        ],
    )


PRESETS = {"corridor-v1": corridor_v1}


def load_environment(spec: str) -> Environment:
    """Resolve an environment from a preset name or a JSON file path."""
    if spec in PRESETS:
        return PRESETS[spec]()
    return Environment.load(spec)
