"""Goal-conditioned dynamics driven by a ball-mapping diffeomorphism.

The velocity field solves G(x) f = lam * (g(x_star) - g(x)), which is the
natural gradient flow of the quadratic potential in transformed coordinates:
straight lines toward the goal in Z-space, pulled back through the map. The
module also provides the closed-form rollout, an RK4 integrator for
time-varying goals and baselines, a finite-time unit-speed variant, the plain
gradient-flow baseline, and an analytic shear map on which the baseline
provably leaves the safe set for off-center goals.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np


class NumericalFailure(RuntimeError):
    """Integration produced a non-finite state."""


@dataclass
class FlowConfig:
    """Knobs shared by all fields and integrators.

    lam is the convergence rate; h the fixed RK4 step (default
    min(0.01, 0.1/lam)); eps_ft the finite-time deadzone radius in Z-space.
    """

    lam: float = 1.0
    tol: float = 1e-9
    h: float | None = None
    eps_ft: float = 1e-3
    max_iter: int = 200
    cond_check: bool = True

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.h is None:
            self.h = min(0.01, 0.1 / self.lam)
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.eps_ft < 0:
            raise ValueError("eps_ft must be nonnegative")


@dataclass
class Trajectory:
    """Time-ordered states with the goal (or goal path samples) that produced them."""

    times: np.ndarray
    states: np.ndarray
    goal: np.ndarray | None = None
    goal_states: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if len(self.times) != len(self.states):
            raise ValueError("times and states must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("states must be finite")

    def tracking_error(self) -> np.ndarray:
        if self.goal_states is None:
            raise ValueError("trajectory has no goal path")
        return self.states - self.goal_states

    def to_dict(self) -> dict:
        d = {
            "times": self.times.tolist(),
            "states": self.states.tolist(),
            "goal": None if self.goal is None else np.asarray(self.goal).tolist(),
            "lambda": self.meta.get("lam"),
            "method": self.meta.get("method"),
        }
        if self.goal_states is not None:
            d["goal_states"] = self.goal_states.tolist()
        extras = {k: v for k, v in self.meta.items() if k not in ("lam", "method")}
        if extras:
            d["meta"] = extras
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        meta = dict(d.get("meta", {}))
        if d.get("lambda") is not None:
            meta["lam"] = d["lambda"]
        if d.get("method") is not None:
            meta["method"] = d["method"]
        gs = d.get("goal_states")
        return cls(
            times=np.asarray(d["times"], dtype=float),
            states=np.asarray(d["states"], dtype=float),
            goal=None if d.get("goal") is None else np.asarray(d["goal"], dtype=float),
            goal_states=None if gs is None else np.asarray(gs, dtype=float),
            meta=meta,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Trajectory":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _as_batch(x):
    X = np.asarray(x, dtype=float)
    return (np.atleast_2d(X), X.ndim == 1)


def _solve_field(m, X, rhs, cfg: FlowConfig):
    G = m.jacobian(X)
    if cfg.cond_check and hasattr(m, "cert_bounds"):
        cb = m.cert_bounds()
        cond = np.linalg.cond(G)
        if np.any(cond > 10.0 * cb.distortion):
            warnings.warn(
                f"Jacobian condition {float(np.max(cond)):.3e} exceeds 10x the "
                f"certified distortion {cb.distortion:.3e}; model file may be corrupted"
            )
    return np.linalg.solve(G, rhs[..., None])[..., 0]


def natural_field(m, x, x_star, cfg: FlowConfig) -> np.ndarray:
    """Velocity f(x, x_star) = G(x)^-1 lam (g(x_star) - g(x)); zero at the goal."""
    X, single = _as_batch(x)
    z = m.forward(X)
    z_star = m.forward(np.asarray(x_star, dtype=float))
    f = _solve_field(m, X, cfg.lam * (z_star - z), cfg)
    return f[0] if single else f


def gradient_flow_field(m, x, x_star, cfg: FlowConfig) -> np.ndarray:
    """Plain gradient-flow baseline -lam G(x)^T (g(x) - g(x_star)).

    Shares the equilibrium with the natural field but is not safe for
    off-center goals (see example1_compare).
    """
    X, single = _as_batch(x)
    z = m.forward(X)
    z_star = m.forward(np.asarray(x_star, dtype=float))
    G = m.jacobian(X)
    f = -cfg.lam * np.einsum("bji,bj->bi", G, z - z_star)
    return f[0] if single else f


def finite_time_field(m, x, x_star, cfg: FlowConfig) -> np.ndarray:
    """Unit-speed-in-Z variant -G^-1 lam (z - z_star)/|z - z_star|.

    Zero inside the deadzone |z - z_star| <= eps_ft, which regularizes the
    non-smooth point at the goal.
    """
    X, single = _as_batch(x)
    z = m.forward(X)
    dz = z - m.forward(np.asarray(x_star, dtype=float))
    nrm = np.linalg.norm(dz, axis=1)
    active = nrm > cfg.eps_ft
    f = np.zeros_like(X)
    if np.any(active):
        rhs = -cfg.lam * dz[active] / nrm[active, None]
        f[active] = _solve_field(m, X[active], rhs, cfg)
    return f[0] if single else f


def rollout_analytic(m, x0, x_star, cfg: FlowConfig, times) -> Trajectory:
    """Sample the closed-form solution: straight line z(t) in Z-space, then invert.

    z(t) = z0 e^{-lam t} + z_star (1 - e^{-lam t}); samples are independent,
    so the whole trajectory is one batched inversion.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("times must be a nonempty 1D array")
    if times[0] < 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be increasing and start at t >= 0")
    x0 = np.asarray(x0, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    z0 = m.forward(x0)
    z_star = m.forward(x_star)
    w = np.exp(-cfg.lam * times)[:, None]
    Z = z0 * w + z_star * (1.0 - w)
    # a NonConvergence raised here already carries the failing sample index
    X = m.inverse(Z, tol=cfg.tol, max_iter=cfg.max_iter)
    return Trajectory(
        times=times,
        states=X,
        goal=x_star,
        meta={"lam": cfg.lam, "method": "analytic", "tol": cfg.tol},
    )


def _rk4(fieldfn, x0, T, h):
    """Fixed-step RK4; final partial step lands exactly on T.

    x0 may be (n,) or (B, n); states come back with a leading time axis.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    x = np.array(x0, dtype=float)
    times = [0.0]
    states = [x.copy()]
    t = 0.0
    while t < T - 1e-12:
        step = min(h, T - t)
        k1 = fieldfn(t, x)
        k2 = fieldfn(t + step / 2, x + step / 2 * k1)
        k3 = fieldfn(t + step / 2, x + step / 2 * k2)
        k4 = fieldfn(t + step, x + step * k3)
        x = x + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t + step
        if not np.all(np.isfinite(x)):
            raise NumericalFailure(f"non-finite state at t={t:.6g}")
        times.append(t)
        states.append(x.copy())
    return np.asarray(times), np.asarray(states)


def integrate_field(fieldfn, x0, T: float, cfg: FlowConfig, goal=None, method="rk4") -> Trajectory:
    """Integrate an arbitrary field callable f(t, x) from a single start."""
    times, states = _rk4(fieldfn, np.asarray(x0, dtype=float), T, cfg.h)
    return Trajectory(
        times=times,
        states=states,
        goal=None if goal is None else np.asarray(goal, dtype=float),
        meta={"lam": cfg.lam, "method": method, "h": cfg.h},
    )


def rollout_rk4(m, x0, x_star, T: float, cfg: FlowConfig) -> Trajectory:
    """RK4 integration of the natural field toward a fixed goal."""
    x_star = np.asarray(x_star, dtype=float)
    return integrate_field(
        lambda t, x: natural_field(m, x, x_star, cfg), x0, T, cfg, goal=x_star
    )


def tracking_rollout(m, x0, goal_path, T: float, cfg: FlowConfig) -> Trajectory:
    """Integrate the natural field with a time-varying goal x_star(t).

    goal_path is a callable t -> (n,); the sampled goal positions are stored
    so tracking error eps(t) = x(t) - x_star(t) can be recovered exactly.
    """
    times, states = _rk4(
        lambda t, x: natural_field(m, x, np.asarray(goal_path(t), dtype=float), cfg),
        np.asarray(x0, dtype=float),
        T,
        cfg.h,
    )
    goal_states = np.asarray([goal_path(t) for t in times], dtype=float)
    return Trajectory(
        times=times,
        states=states,
        goal_states=goal_states,
        meta={"lam": cfg.lam, "method": "tracking", "h": cfg.h},
    )


def piecewise_linear_path(waypoint_times, waypoints):
    """Goal path interpolating waypoints linearly; clamps outside the range."""
    wt = np.asarray(waypoint_times, dtype=float)
    wp = np.asarray(waypoints, dtype=float)
    if len(wt) != len(wp) or len(wt) < 1:
        raise ValueError("need equal, nonzero numbers of times and waypoints")

    def path(t):
        return np.array([np.interp(t, wt, wp[:, d]) for d in range(wp.shape[1])])

    return path


def circle_path(center, radius, omega, phase=0.0):
    """Goal moving on a circle with angular rate omega (speed = radius*omega)."""
    center = np.asarray(center, dtype=float)

    def path(t):
        a = omega * t + phase
        return center + radius * np.array([np.cos(a), np.sin(a)])

    return path


# -- analytic shear example ---------------------------------------------------


def _shear_h(x1):
    return 2.0 * np.sin(x1) + np.cos(5.0 * x1) - 3.0 * x1


def _shear_dh(x1):
    return 2.0 * np.cos(x1) - 5.0 * np.sin(5.0 * x1) - 3.0


def shear_forward(x) -> np.ndarray:
    """g(x) = (x1, h(x1) x1 + x2) with h(x1) = 2 sin x1 + cos 5x1 - 3 x1."""
    X = np.asarray(x, dtype=float)
    out = np.array(X, copy=True)
    x1 = X[..., 0]
    out[..., 1] = _shear_h(x1) * x1 + X[..., 1]
    return out


def shear_inverse(z) -> np.ndarray:
    """Closed-form inverse: x1 = z1, x2 = z2 - h(z1) z1."""
    Z = np.asarray(z, dtype=float)
    out = np.array(Z, copy=True)
    z1 = Z[..., 0]
    out[..., 1] = Z[..., 1] - _shear_h(z1) * z1
    return out


def shear_jacobian(x) -> np.ndarray:
    """Lower-triangular Jacobian with unit diagonal."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    x1 = X[:, 0]
    J = np.zeros((len(X), 2, 2))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0
    J[:, 1, 0] = _shear_dh(x1) * x1 + _shear_h(x1)
    return J[0] if single else J


class ShearMap:
    """Map-protocol wrapper around the analytic shear transformation."""

    n = 2

    def forward(self, x):
        return shear_forward(x)

    def inverse(self, z, tol=None, max_iter=None):
        return shear_inverse(z)

    def jacobian(self, x):
        return shear_jacobian(x)


def example1_compare(goal, starts, cfg: FlowConfig | None = None, T: float = 8.0) -> dict:
    """Integrate natural and gradient flows on the shear map from each start.

    Reports the maximum Z-space norm reached by each field; a value above 1
    means the trajectory left the safe set (the ball image). The safe set here
    is shear_inverse(B^2), so the goal must satisfy |shear_forward(goal)| <= 1.
    """
    cfg = cfg or FlowConfig(cond_check=False)
    m = ShearMap()
    goal = np.asarray(goal, dtype=float)
    if np.linalg.norm(shear_forward(goal)) > 1.0 + 1e-12:
        raise ValueError("goal lies outside the shear-map safe set")
    starts = np.atleast_2d(np.asarray(starts, dtype=float))

    def zmax(fieldfn):
        _, states = _rk4(lambda t, x: fieldfn(m, x, goal, cfg), starts, T, cfg.h)
        return np.linalg.norm(shear_forward(states), axis=-1).max(axis=0)

    nat = zmax(natural_field)
    grad = zmax(gradient_flow_field)
    return {
        "natural_flow_max_z_norm": float(nat.max()),
        "gradient_flow_max_z_norm": float(grad.max()),
        "gradient_flow_exits": bool(grad.max() > 1.0 + 1e-3),
        "per_start_gradient_max": grad,
        "per_start_natural_max": nat,
    }


def find_gradient_flow_exit(
    goal_radii=(0.7, 0.5, 0.3),
    n_goal_angles=8,
    start_radius=0.92,
    n_starts=12,
    T: float = 8.0,
    cfg: FlowConfig | None = None,
) -> dict:
    """Deterministic grid search for a (start, goal) pair where the gradient
    flow leaves the shear-map safe set while the natural flow does not.

    Goals are taken on rings in Z-space (off-center; the centered goal is
    provably safe for both fields), starts on a single ring near the boundary.
    Scanning stops at the first exiting goal; the returned report covers the
    scanned sweep for both fields.
    """
    cfg = cfg or FlowConfig(cond_check=False)
    angles = np.linspace(0.0, 2 * np.pi, n_starts, endpoint=False)
    starts = shear_inverse(
        start_radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    )
    scanned = []
    exit_info = None
    for radius in goal_radii:
        for ang in np.linspace(0.0, 2 * np.pi, n_goal_angles, endpoint=False):
            zg = radius * np.array([np.cos(ang), np.sin(ang)])
            goal = shear_inverse(zg)
            rep = example1_compare(goal, starts, cfg, T)
            scanned.append((goal, rep))
            if rep["gradient_flow_exits"]:
                worst = int(np.argmax(rep["per_start_gradient_max"]))
                exit_info = {
                    "goal": goal,
                    "start": starts[worst],
                    "gradient_max_z_norm": rep["gradient_flow_max_z_norm"],
                }
                break
        if exit_info:
            break
    natural_max = max(rep["natural_flow_max_z_norm"] for _, rep in scanned)
    return {
        "found": exit_info is not None,
        "exit": exit_info,
        "natural_flow_max_z_norm": float(natural_max),
        "goals_scanned": len(scanned),
        "starts": starts,
    }
