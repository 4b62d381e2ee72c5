"""Sample-based roadmap over the safe set and cost-to-go labeling.

An RRT rooted at the designated goal covers the safe set with samples; a
k-nearest-neighbor graph over those samples then yields shortest-path
cost-to-go labels via Dijkstra. Labels are raw path lengths.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _dijkstra
from scipy.spatial import cKDTree

from .env import Environment


@dataclass
class Roadmap:
    """Undirected geometric graph over safe nodes.

    edges hold index pairs (i, j) with i < j; every edge passed the analytic
    collision check and lengths are Euclidean.
    """

    nodes: np.ndarray
    edges: np.ndarray
    lengths: np.ndarray
    root_index: int = 0

    def __post_init__(self):
        if len(self.nodes) == 0:
            raise ValueError("roadmap needs at least one node")
        if not (0 <= self.root_index < len(self.nodes)):
            raise ValueError("root_index out of range")


@dataclass
class LabeledDatasets:
    """Safe samples with cost-to-go labels, unsafe samples with c_bar + delta.

    demo_* arrays, when present, hold (state, goal, velocity) triples.
    """

    safe: np.ndarray
    safe_labels: np.ndarray
    unsafe: np.ndarray
    unsafe_labels: np.ndarray
    c_bar: float
    delta: float
    demo_x: np.ndarray | None = None
    demo_goal: np.ndarray | None = None
    demo_xdot: np.ndarray | None = None
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.safe)

    @property
    def N(self) -> int:
        return len(self.unsafe)

    @property
    def has_demo(self) -> bool:
        return self.demo_x is not None and len(self.demo_x) > 0


def rrt_grow(env: Environment, root, node_count: int, step_size: float, seed) -> np.ndarray:
    """Grow a standard RRT rooted at `root`; returns (node_count, 2) nodes.

    Each iteration samples a uniform workspace point, steers from the nearest
    tree node by at most step_size, and keeps the new node when the connecting
    segment is collision-free. Deterministic for a fixed seed.
    """
    root = np.asarray(root, dtype=float)
    if not env.is_safe(root):
        raise ValueError("RRT root is not in the safe set")
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    if node_count < 1:
        raise ValueError("node_count must be >= 1")

    rng = np.random.default_rng(seed)
    nodes = np.empty((node_count, 2))
    nodes[0] = root
    count = 1
    max_iters = 100 * node_count
    for _ in range(max_iters):
        if count >= node_count:
            break
        target = rng.uniform(env.lo, env.hi)
        d2 = np.sum((nodes[:count] - target) ** 2, axis=1)
        nearest = nodes[np.argmin(d2)]
        delta = target - nearest
        dist = float(np.linalg.norm(delta))
        if dist == 0.0:
            continue
        new = nearest + delta * min(1.0, step_size / dist)
        if env.segment_free(nearest, new):
            nodes[count] = new
            count += 1
    if count < node_count:
        raise RuntimeError(
            f"RRT grew only {count}/{node_count} nodes in {max_iters} iterations"
        )
    return nodes


def default_step_size(env: Environment) -> float:
    """5% of the workspace diagonal."""
    return 0.05 * env.diagonal


def build_knn_graph(env: Environment, nodes: np.ndarray, k: int, root_index: int = 0) -> Roadmap:
    """Link each node to its k nearest Euclidean neighbors where the segment is free.

    Edges are deduplicated and symmetric; isolated nodes are permitted here
    and handled at labeling time.
    """
    nodes = np.asarray(nodes, dtype=float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(nodes) == 0:
        raise ValueError("nodes must be nonempty")
    safe = env.is_safe(nodes)
    if not np.all(safe):
        raise ValueError("all roadmap nodes must be safe")

    kq = min(k + 1, len(nodes))
    tree = cKDTree(nodes)
    _, nbrs = tree.query(nodes, k=kq)
    nbrs = np.atleast_2d(nbrs)
    if nbrs.ndim == 1:
        nbrs = nbrs[:, None]

    ii = np.repeat(np.arange(len(nodes)), nbrs.shape[1])
    jj = nbrs.ravel()
    keep = ii != jj
    ii, jj = ii[keep], jj[keep]
    lo = np.minimum(ii, jj)
    hi = np.maximum(ii, jj)
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)

    free = env.segments_free(nodes[pairs[:, 0]], nodes[pairs[:, 1]])
    pairs = pairs[free]
    lengths = np.linalg.norm(nodes[pairs[:, 0]] - nodes[pairs[:, 1]], axis=1)
    return Roadmap(nodes=nodes, edges=pairs, lengths=lengths, root_index=root_index)


def cost_to_go(roadmap: Roadmap) -> np.ndarray:
    """Dijkstra shortest-path distance from every node to the root.

    Unreachable nodes get +inf (a warning reports how many); raises when the
    root cannot reach more than half of the nodes.
    """
    n = len(roadmap.nodes)
    if roadmap.edges.size:
        i, j = roadmap.edges[:, 0], roadmap.edges[:, 1]
        w = roadmap.lengths
        graph = csr_matrix(
            (np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(n, n),
        )
    else:
        graph = csr_matrix((n, n))
    dist = _dijkstra(graph, directed=False, indices=roadmap.root_index)
    unreachable = int(np.sum(~np.isfinite(dist)))
    if unreachable > 0.5 * n:
        raise RuntimeError(
            f"root unreachable from {unreachable}/{n} nodes; graph too sparse (raise k)"
        )
    if unreachable:
        warnings.warn(f"{unreachable} unreachable nodes dropped from labeling")
    return dist


def assemble_datasets(
    safe_points: np.ndarray,
    labels: np.ndarray,
    unsafe_points: np.ndarray,
    delta: float,
    demo: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> LabeledDatasets:
    """Pair safe points with their labels and give unsafe points c_bar + delta.

    Non-finite labels (unreachable nodes) are dropped with a count.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    safe_points = np.asarray(safe_points, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if len(labels) == 0:
        raise ValueError("labels must be nonempty")
    if len(labels) != len(safe_points):
        raise ValueError("labels and safe_points disagree in length")

    keep = np.isfinite(labels)
    dropped = int(np.sum(~keep))
    safe_points, labels = safe_points[keep], labels[keep]
    if len(labels) == 0:
        raise ValueError("no finite labels left after dropping unreachable nodes")

    c_bar = float(np.max(labels))
    unsafe_points = np.asarray(unsafe_points, dtype=float).reshape(-1, safe_points.shape[1])
    unsafe_labels = np.full(len(unsafe_points), c_bar + delta)
    if len(unsafe_points) == 0:
        warnings.warn("empty unsafe set: training will not constrain the boundary")

    demo_x = demo_goal = demo_xdot = None
    if demo is not None:
        demo_x, demo_goal, demo_xdot = (np.asarray(a, dtype=float) for a in demo)
    return LabeledDatasets(
        safe=safe_points,
        safe_labels=labels,
        unsafe=unsafe_points,
        unsafe_labels=unsafe_labels,
        c_bar=c_bar,
        delta=float(delta),
        demo_x=demo_x,
        demo_goal=demo_goal,
        demo_xdot=demo_xdot,
        dropped=dropped,
    )


def save_datasets(ds: LabeledDatasets, path) -> None:
    """Write datasets as JSON lines: labeled points, then any demo triples."""
    with open(path, "w") as fh:
        for x, c in zip(ds.safe, ds.safe_labels):
            fh.write(json.dumps({"x": x.tolist(), "c": float(c), "kind": "safe"}) + "\n")
        for x, c in zip(ds.unsafe, ds.unsafe_labels):
            fh.write(json.dumps({"x": x.tolist(), "c": float(c), "kind": "unsafe"}) + "\n")
        if ds.has_demo:
            for x, g, v in zip(ds.demo_x, ds.demo_goal, ds.demo_xdot):
                fh.write(
                    json.dumps(
                        {"x": x.tolist(), "x_star": g.tolist(), "xdot": v.tolist()}
                    )
                    + "\n"
                )


def load_datasets(path) -> LabeledDatasets:
    """Inverse of save_datasets; recovers c_bar and delta from the labels."""
    safe, safe_c, unsafe, unsafe_c = [], [], [], []
    demo_x, demo_goal, demo_xdot = [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "kind" in obj:
                if obj["kind"] == "safe":
                    safe.append(obj["x"])
                    safe_c.append(obj["c"])
                elif obj["kind"] == "unsafe":
                    unsafe.append(obj["x"])
                    unsafe_c.append(obj["c"])
                else:
                    raise ValueError(f"unknown kind {obj['kind']!r}")
            else:
                demo_x.append(obj["x"])
                demo_goal.append(obj["x_star"])
                demo_xdot.append(obj["xdot"])
    if not safe:
        raise ValueError(f"no safe samples in {path}")
    safe = np.asarray(safe, dtype=float)
    safe_c = np.asarray(safe_c, dtype=float)
    c_bar = float(np.max(safe_c))
    unsafe = np.asarray(unsafe, dtype=float).reshape(-1, safe.shape[1])
    unsafe_c = np.asarray(unsafe_c, dtype=float)
    if len(unsafe_c):
        delta = float(unsafe_c[0] - c_bar)
        if not np.allclose(unsafe_c, unsafe_c[0]):
            raise ValueError("unsafe labels are not all equal")
    else:
        delta = 0.1 * c_bar if c_bar > 0 else 1.0
    demo = None
    if demo_x:
        demo = (np.asarray(demo_x), np.asarray(demo_goal), np.asarray(demo_xdot))
    return LabeledDatasets(
        safe=safe,
        safe_labels=safe_c,
        unsafe=unsafe,
        unsafe_labels=unsafe_c,
        c_bar=c_bar,
        delta=delta,
        demo_x=demo[0] if demo else None,
        demo_goal=demo[1] if demo else None,
        demo_xdot=demo[2] if demo else None,
    )


def default_delta(c_bar: float) -> float:
    """10% of the maximum safe label."""
    return 0.1 * c_bar
