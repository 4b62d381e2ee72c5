"""Level-set separation training for the ball-mapping diffeomorphism.

The candidate Lyapunov value V(x) = (lam/2) |g(x)|^2 (goal-centered map) is
fitted so that safe samples stay below their cost-to-go labels and unsafe
samples stay above the common label c_bar + delta, via squared hinge losses.
An optional demonstration term penalizes the velocity residual of the natural
field, differentiated exactly through the linear solve. Optimization is
plain minibatch Adam on the flat parameter vector; the goal-centering shift
is a function of the parameters, so it is implicitly re-evaluated at every
step and the analytic gradients include its contribution.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bilip import BiLipMap
from .roadmap import LabeledDatasets


@dataclass
class TrainConfig:
    epochs: int = 1500
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rho: float = 0.0
    lam: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.lam <= 0:
            raise ValueError("lam must be positive")


@dataclass
class TrainReport:
    loss_total: list = field(default_factory=list)
    loss_safe: list = field(default_factory=list)
    loss_unsafe: list = field(default_factory=list)
    loss_task: list = field(default_factory=list)
    final_max_safe_violation: float = float("nan")
    final_min_unsafe_margin: float = float("nan")
    level_c: float | None = None
    ball_scale: float | None = None
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "loss_total": self.loss_total,
            "loss_safe": self.loss_safe,
            "loss_unsafe": self.loss_unsafe,
            "loss_task": self.loss_task,
            "final_max_safe_violation": self.final_max_safe_violation,
            "final_min_unsafe_margin": self.final_min_unsafe_margin,
            "level_c": self.level_c,
            "ball_scale": self.ball_scale,
            "seconds": self.seconds,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def save_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "total", "safe", "unsafe", "task"])
            for i in range(len(self.loss_total)):
                w.writerow(
                    [i, self.loss_total[i], self.loss_safe[i], self.loss_unsafe[i], self.loss_task[i]]
                )


class Adam:
    """Standard Adam with bias correction on a flat parameter vector."""

    def __init__(self, dim, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def lyapunov_value(m: BiLipMap, x, lam: float) -> float | np.ndarray:
    """V(x) = (lam/2) |g(x)|^2; zero exactly at the goal center."""
    z = m.forward(x)
    return 0.5 * lam * np.sum(np.asarray(z) ** 2, axis=-1)


def _label_unit_values(m: BiLipMap, x, lam: float) -> np.ndarray:
    # Lyapunov values in label units regardless of any ball rescale applied
    z = m.forward(x) * m.ball_scale
    return 0.5 * lam * np.sum(np.atleast_2d(z) ** 2, axis=-1)


def _hinge_terms(V, c, safe_mask):
    viol_s = np.maximum(V[safe_mask] - c[safe_mask], 0.0)
    viol_u = np.maximum(c[~safe_mask] - V[~safe_mask], 0.0)
    ls = float(np.mean(viol_s**2)) if viol_s.size else 0.0
    lu = float(np.mean(viol_u**2)) if viol_u.size else 0.0
    return ls, lu, viol_s, viol_u


def _separation_batch(m: BiLipMap, X, c, safe_mask, lam, want_grad):
    """Loss (and gradient) of the hinge objective on one batch of rows."""
    if m.goal is None:
        raise ValueError("map must be goal-centered before training")
    scale = m.out_scale / m.ball_scale
    rows = np.vstack([X, m.goal[None, :]])
    if want_grad:
        Y, cache = m._blocks_apply(rows, want_cache=True)
    else:
        Y = m._blocks_apply(rows)
    Z = scale * (Y[:-1] - Y[-1])
    V = 0.5 * lam * np.sum(Z**2, axis=1)
    ls, lu, viol_s, viol_u = _hinge_terms(V, c, safe_mask)
    total = ls + lu
    if not want_grad:
        return total, ls, lu, None

    cot = np.zeros_like(Z)
    if viol_s.size:
        cot[safe_mask] = (2.0 * lam / viol_s.size) * viol_s[:, None] * Z[safe_mask]
    if viol_u.size:
        cot[~safe_mask] = (-2.0 * lam / viol_u.size) * viol_u[:, None] * Z[~safe_mask]
    C = scale * np.vstack([cot, -cot.sum(axis=0, keepdims=True)])
    grad = np.zeros(m.param_count)
    m._blocks_vjp(cache, C, grad)
    return total, ls, lu, grad


def _dataset_rows(ds: LabeledDatasets):
    X = np.vstack([ds.safe, ds.unsafe]) if ds.N else ds.safe.copy()
    c = np.concatenate([ds.safe_labels, ds.unsafe_labels]) if ds.N else ds.safe_labels.copy()
    mask = np.zeros(len(X), dtype=bool)
    mask[: ds.M] = True
    return X, c, mask


def separation_loss(m: BiLipMap, ds: LabeledDatasets, lam: float):
    """(total, safe_part, unsafe_part) squared-hinge losses on the datasets."""
    X, c, mask = _dataset_rows(ds)
    total, ls, lu, _ = _separation_batch(m, X, c, mask, lam, want_grad=False)
    return total, ls, lu


def separation_loss_grad(m: BiLipMap, ds: LabeledDatasets, lam: float):
    """Loss triple plus the exact parameter gradient of the total."""
    X, c, mask = _dataset_rows(ds)
    total, ls, lu, grad = _separation_batch(m, X, c, mask, lam, want_grad=True)
    return (total, ls, lu), grad


def demo_loss(m: BiLipMap, demo_x, demo_goal, demo_xdot, lam: float) -> float:
    """Mean squared residual between demonstrated and model velocities."""
    X = np.atleast_2d(np.asarray(demo_x, dtype=float))
    goals = np.atleast_2d(np.asarray(demo_goal, dtype=float))
    xdot = np.atleast_2d(np.asarray(demo_xdot, dtype=float))
    if not len(X):
        raise ValueError("demo set must be nonempty")
    z = m.forward(X)
    zg = m.forward(goals)
    G = m.jacobian(X)
    f = np.linalg.solve(G, (lam * (zg - z))[..., None])[..., 0]
    return float(np.mean(np.sum((xdot - f) ** 2, axis=1)))


def demo_loss_grad(m: BiLipMap, demo_x, demo_goal, demo_xdot, lam: float):
    """Demonstration loss and its exact parameter gradient.

    Differentiates through the linear solve with the adjoint rule:
    d(G^-1 w) = -G^-1 dG f + G^-1 dw, so with a = G^-T u the parameter
    cotangents are -a f^T on G, -lam a on g(x), +lam a on g(x_star).
    """
    X = np.atleast_2d(np.asarray(demo_x, dtype=float))
    goals = np.atleast_2d(np.asarray(demo_goal, dtype=float))
    xdot = np.atleast_2d(np.asarray(demo_xdot, dtype=float))
    K = len(X)
    if K == 0:
        raise ValueError("demo set must be nonempty")
    z = m.forward(X)
    zg = m.forward(goals)
    G = m.jacobian(X)
    f = np.linalg.solve(G, (lam * (zg - z))[..., None])[..., 0]
    err = f - xdot
    loss = float(np.mean(np.sum(err**2, axis=1)))

    u = (2.0 / K) * err
    a = np.linalg.solve(np.transpose(G, (0, 2, 1)), u[..., None])[..., 0]
    grad = m.param_gradient(np.vstack([X, goals]), np.vstack([-lam * a, lam * a]))
    grad += m.jacobian_param_vjp(X, -np.einsum("bi,bj->bij", a, f))
    return loss, grad


def train(m: BiLipMap, ds: LabeledDatasets, cfg: TrainConfig):
    """Minibatch Adam on the separation losses (plus rho-weighted demo term).

    Deterministic for a fixed seed. Returns (m, TrainReport); m is updated in
    place, still in label units (run calibrate_level afterwards).
    """
    if m.goal is None:
        raise ValueError("map must be goal-centered (set_goal_center) before training")
    if ds.M == 0:
        raise ValueError("safe dataset is empty")
    if ds.N == 0:
        warnings.warn("unsafe dataset is empty; the learned boundary is unconstrained")
    use_demo = cfg.rho > 0 and ds.has_demo

    X, c, mask = _dataset_rows(ds)
    rng = np.random.default_rng(cfg.seed)
    theta = m.param_vector()
    opt = Adam(theta.size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    report = TrainReport()
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, _, _, grad = _separation_batch(m, X[idx], c[idx], mask[idx], cfg.lam, True)
            if use_demo:
                dl, dg = demo_loss_grad(m, ds.demo_x, ds.demo_goal, ds.demo_xdot, cfg.lam)
                loss += cfg.rho * dl
                grad += cfg.rho * dg
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            theta = opt.step(theta, grad)
            m.set_param_vector(theta)
        total, ls, lu = separation_loss(m, ds, cfg.lam)
        lt = demo_loss(m, ds.demo_x, ds.demo_goal, ds.demo_xdot, cfg.lam) if use_demo else 0.0
        report.loss_total.append(total + cfg.rho * lt)
        report.loss_safe.append(ls)
        report.loss_unsafe.append(lu)
        report.loss_task.append(lt)

    margins = separation_margins(m, ds, cfg.lam)
    report.final_max_safe_violation = margins["max_safe_violation"]
    report.final_min_unsafe_margin = margins["min_unsafe_margin"]
    report.seconds = time.perf_counter() - t0
    return m, report


def separation_margins(m: BiLipMap, ds: LabeledDatasets, lam: float) -> dict:
    """Empirical separation quality in label units (valid pre/post rescale)."""
    Vs = _label_unit_values(m, ds.safe, lam)
    out = {
        "max_safe_violation": float(np.maximum(Vs - ds.safe_labels, 0.0).max()),
        "frac_safe_ok": float(np.mean(Vs <= ds.safe_labels)),
        "frac_safe_below_cbar": float(np.mean(Vs <= ds.c_bar)),
    }
    if ds.N:
        Vu = _label_unit_values(m, ds.unsafe, lam)
        out.update(
            min_unsafe_margin=float((Vu - ds.unsafe_labels).min()),
            frac_unsafe_ok=float(np.mean(Vu >= ds.c_bar)),
        )
    else:
        out.update(min_unsafe_margin=float("nan"), frac_unsafe_ok=float("nan"))
    return out


def calibrate_level(m: BiLipMap, ds: LabeledDatasets, lam: float, delta: float | None = None):
    """Pick the level c = c_bar + delta/2 and rescale g so {V = c} maps to the
    unit sphere (ball_scale r = sqrt(2c/lam)).

    Warns instead of failing when the data are not strictly separated at c;
    safety is then certified only with respect to the learned set.
    """
    delta = ds.delta if delta is None else float(delta)
    if delta <= 0:
        raise ValueError("delta must be positive")
    c = ds.c_bar + 0.5 * delta
    Vs = _label_unit_values(m, ds.safe, lam)
    separated = bool(np.all(Vs <= c))
    if ds.N:
        Vu = _label_unit_values(m, ds.unsafe, lam)
        separated = separated and bool(np.all(Vu > c))
    if not separated:
        warnings.warn(
            f"data not strictly separated at level c={c:.6g}; "
            "safety holds for the learned set only"
        )
    m.set_ball_scale(float(np.sqrt(2.0 * c / lam)))
    return c, m


def suggest_out_scale(ds: LabeledDatasets, goal, lam: float) -> float:
    """Data-driven out_scale so the identity-initialized map starts near the
    label scale: match |g(x)| = s|x - goal| to sqrt(2 c / lam) in the median."""
    goal = np.asarray(goal, dtype=float)
    d = np.linalg.norm(ds.safe - goal, axis=1)
    keep = (d > 1e-9) & (ds.safe_labels > 0)
    if not np.any(keep):
        return 1.0
    return float(np.median(np.sqrt(2.0 * ds.safe_labels[keep] / lam) / d[keep]))
