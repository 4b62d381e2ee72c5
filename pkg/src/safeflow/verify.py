"""Executable certificates for the planner's guarantees.

Every check evaluates one inequality on concrete samples or trajectories and
returns a signed worst-case margin (pass iff margin >= -tolerance). Checks are
deterministic given their seed and independent of each other. True-environment
safety is reported but never asserted: the construction guarantees safety of
the learned set (the ball preimage); how well that set matches the real
environment depends on data coverage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .env import Environment
from .flow import FlowConfig, Trajectory, finite_time_field, natural_field, rollout_analytic


@dataclass
class CertificateReport:
    name: str
    margin: float
    tolerance: float
    passed: bool
    asserted: bool = True
    samples: int = 0
    seed: int | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "margin": self.margin,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "asserted": self.asserted,
            "samples": self.samples,
            "seed": self.seed,
            "details": self.details,
        }


def save_reports(reports, path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)


def any_asserted_failure(reports) -> bool:
    return any(r.asserted and not r.passed for r in reports)


def _report(name, margin, tol, **kw) -> CertificateReport:
    return CertificateReport(
        name=name, margin=float(margin), tolerance=float(tol),
        passed=bool(margin >= -tol), **kw,
    )


def sample_ball(rng, count, n=2, radius=1.0) -> np.ndarray:
    """Uniform samples in the n-ball of the given radius."""
    g = rng.normal(size=(count, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(count, 1)) ** (1.0 / n)
    return g * r


def check_bilip(m, region_lo, region_hi, pairs: int, seed) -> CertificateReport:
    """Sampled two-sided Lipschitz ratios against the certified bounds.

    For maps without a certificate (e.g. the analytic shear), the empirical
    extrema are reported without assertion.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    rng = np.random.default_rng(seed)
    lo = np.asarray(region_lo, dtype=float)
    hi = np.asarray(region_hi, dtype=float)
    A = rng.uniform(lo, hi, size=(pairs, len(lo)))
    B = rng.uniform(lo, hi, size=(pairs, len(lo)))
    dx = np.linalg.norm(A - B, axis=1)
    keep = dx > 1e-12
    A, B, dx = A[keep], B[keep], dx[keep]
    ratios = np.linalg.norm(m.forward(A) - m.forward(B), axis=1) / dx
    emp = {"empirical_mu": float(ratios.min()), "empirical_nu": float(ratios.max())}
    if not hasattr(m, "cert_bounds"):
        return CertificateReport(
            name="bilip_ratios", margin=0.0, tolerance=0.0, passed=True,
            asserted=False, samples=len(ratios), seed=seed, details=emp,
        )
    cb = m.cert_bounds()
    margin = min(float(ratios.min() - cb.mu), float(cb.nu - ratios.max()))
    emp.update(mu=cb.mu, nu=cb.nu, violations=int(
        np.sum((ratios < cb.mu * (1 - 1e-9)) | (ratios > cb.nu * (1 + 1e-9)))
    ))
    return _report("bilip_ratios", margin, 1e-9 * cb.nu,
                   samples=len(ratios), seed=seed, details=emp)


def check_barrier(m, lam, safe_samples, goals, seed, n_annulus=1000) -> CertificateReport:
    """Barrier h = 1 - |g|^2: decay h' + 2*lam*h >= 0 on the given samples for
    every goal, and h' > 0 strictly on points mapping to the annulus 1 < |g| <= 2.

    The decay claim holds by construction for points of the learned safe set
    (|g| <= 1); pass learned-set samples to certify it.
    """
    rng = np.random.default_rng(seed)
    Z = np.atleast_2d(m.forward(np.asarray(safe_samples, dtype=float)))
    Zg = np.atleast_2d(m.forward(np.asarray(goals, dtype=float)))
    # hdot = 2 lam z.(z - zg); decay margin hdot + 2 lam h = 2 lam (1 - z.zg)
    inner = Z @ Zg.T
    decay = 2.0 * lam * (1.0 - inner)
    decay_min = float(decay.min())

    zr = sample_ball(rng, n_annulus, n=Z.shape[1])
    zr /= np.linalg.norm(zr, axis=1, keepdims=True)
    zr *= rng.uniform(1.0, 2.0, size=(n_annulus, 1))
    x_out = m.inverse(zr)
    Zo = np.atleast_2d(m.forward(x_out))
    hdot_out = 2.0 * lam * (np.sum(Zo**2, axis=1)[:, None] - Zo @ Zg.T)
    hdot_out_min = float(hdot_out.min())

    margin = min(decay_min, hdot_out_min)
    return _report(
        "barrier_decay", margin, 1e-9,
        samples=Z.shape[0] * Zg.shape[0] + n_annulus * Zg.shape[0], seed=seed,
        details={
            "decay_margin_min": decay_min,
            "unsafe_hdot_min": hdot_out_min,
            "unsafe_hdot_positive": bool(hdot_out_min > 0),
        },
    )


def check_convergence(trajectories, bounds, lam) -> CertificateReport:
    """Exponential bound |x(t) - x_star| <= (nu/mu) e^{-lam t} |x0 - x_star|."""
    slack = 1e-6
    margin = np.inf
    worst = None
    total = 0
    for traj in trajectories:
        if traj.goal is None:
            raise ValueError("convergence check needs fixed-goal trajectories")
        d = np.linalg.norm(traj.states - traj.goal, axis=1)
        bound = bounds.distortion * np.exp(-lam * traj.times) * d[0] * (1 + slack)
        gap = bound - d
        total += len(d)
        i = int(np.argmin(gap))
        if gap[i] < margin:
            margin, worst = float(gap[i]), {"t": float(traj.times[i]), "dist": float(d[i])}
    return _report("exponential_convergence", margin, 0.0,
                   samples=total, details={"worst": worst, "slack": slack})


def check_velocity(m, lam, grid_points, goals, cfg: FlowConfig | None = None) -> CertificateReport:
    """Speed bound |f| <= 2 lam / mu over in-ball grid points x goals."""
    cfg = cfg or FlowConfig(lam=lam, cond_check=False)
    pts = np.atleast_2d(np.asarray(grid_points, dtype=float))
    inball = np.linalg.norm(m.forward(pts), axis=1) <= 1.0
    pts = pts[inball]
    bound = 2.0 * lam / m.cert_bounds().mu
    vmax = 0.0
    for g in np.atleast_2d(goals):
        f = natural_field(m, pts, g, cfg)
        vmax = max(vmax, float(np.linalg.norm(f, axis=1).max()))
    return _report("velocity_bound", bound - vmax, 1e-9 * bound,
                   samples=len(pts) * len(np.atleast_2d(goals)),
                   details={"max_speed": vmax, "bound": bound, "grid_in_ball": len(pts)})


def check_finite_time_band(m, lam, grid_points, goals, cfg: FlowConfig | None = None) -> CertificateReport:
    """Finite-time field speed inside [lam/nu, lam/mu] outside the deadzone."""
    cfg = cfg or FlowConfig(lam=lam, cond_check=False)
    cb = m.cert_bounds()
    pts = np.atleast_2d(np.asarray(grid_points, dtype=float))
    inball = np.linalg.norm(m.forward(pts), axis=1) <= 1.0
    pts = pts[inball]
    lo_band, hi_band = lam / cb.nu, lam / cb.mu
    margin = np.inf
    total = 0
    for g in np.atleast_2d(goals):
        dz = np.linalg.norm(m.forward(pts) - m.forward(np.asarray(g, dtype=float)), axis=1)
        active = dz > cfg.eps_ft
        if not np.any(active):
            continue
        f = finite_time_field(m, pts[active], g, cfg)
        speed = np.linalg.norm(f, axis=1)
        margin = min(margin, float((speed - lo_band).min()), float((hi_band - speed).min()))
        total += int(np.sum(active))
    return _report("finite_time_band", margin, 1e-9 * hi_band, samples=total,
                   details={"band": [lo_band, hi_band]})


def check_tracking(m, traj: Trajectory, lam, b=None, slack=0.02, ball_tol=1e-6) -> CertificateReport:
    """Time-varying-goal bounds: tracking error within
    (nu/mu)(|eps(0)| e^{-lam t} + b/lam) with multiplicative slack, and the
    state staying in the learned set (|g(x(t))| <= 1 + tol)."""
    if traj.goal_states is None:
        raise ValueError("tracking check needs a trajectory with goal samples")
    cb = m.cert_bounds()
    dt = np.diff(traj.times)
    speeds = np.linalg.norm(np.diff(traj.goal_states, axis=0), axis=1) / dt
    b_est = float(speeds.max())
    b = b_est if b is None else max(float(b), b_est)
    eps = np.linalg.norm(traj.tracking_error(), axis=1)
    bound = cb.distortion * (eps[0] * np.exp(-lam * traj.times) + b / lam) * (1 + slack)
    err_margin = float((bound - eps).min())
    znorm = np.linalg.norm(m.forward(traj.states), axis=1)
    ball_margin = float((1.0 + ball_tol - znorm).min())
    margin = min(err_margin, ball_margin)
    return _report("tracking_bound", margin, 0.0, samples=len(eps),
                   details={"b": b, "error_margin": err_margin,
                            "ball_margin": ball_margin, "max_z_norm": float(znorm.max())})


def check_ball_invariance(m, trajectories, tol=1e-6) -> CertificateReport:
    """Construction-level safety: |g(x(t))| <= 1 + tol along every trajectory.

    Holds for analytic rollouts with in-ball endpoints for any parameter
    values, trained or not.
    """
    margin = np.inf
    total = 0
    zmax = 0.0
    for traj in trajectories:
        znorm = np.linalg.norm(m.forward(traj.states), axis=1)
        zmax = max(zmax, float(znorm.max()))
        margin = min(margin, float((1.0 + tol - znorm).min()))
        total += len(znorm)
    return _report("ball_invariance", margin, 0.0, samples=total,
                   details={"max_z_norm": zmax, "tol": tol})


def check_safety_env(env: Environment, trajectories, threshold=None) -> CertificateReport:
    """True-environment safety rate (report-only, never asserted)."""
    traj_safe = []
    sample_frac = []
    first_violation = None
    for ti, traj in enumerate(trajectories):
        ok = env.is_safe(traj.states)
        traj_safe.append(bool(np.all(ok)))
        sample_frac.append(float(np.mean(ok)))
        if not traj_safe[-1] and first_violation is None:
            first_violation = {"trajectory": ti, "index": int(np.argmin(ok))}
    frac_traj = float(np.mean(traj_safe)) if traj_safe else 1.0
    passed = True if threshold is None else frac_traj >= threshold
    return CertificateReport(
        name="true_env_safety",
        margin=frac_traj - (threshold or 0.0),
        tolerance=0.0,
        passed=passed,
        asserted=False,
        samples=sum(len(t.states) for t in trajectories),
        details={
            "fraction_trajectories_safe": frac_traj,
            "fraction_samples_safe": float(np.mean(sample_frac)) if sample_frac else 1.0,
            "first_violation": first_violation,
            "threshold": threshold,
        },
    )


def run_full_suite(
    model,
    env: Environment,
    seed: int = 0,
    pairs: int = 10**5,
    n_rollouts: int = 100,
    n_times: int = 200,
    n_grid: int = 100,
    n_goals: int = 10,
    n_barrier: int = 10**4,
    horizon_lam: float = 8.0,
    tracking: bool = True,
    safety_threshold: float = 0.95,
) -> list[CertificateReport]:
    """Run every certificate on a trained planner model against an environment."""
    m, lam = model.map, model.lam
    cfg = FlowConfig(lam=lam, cond_check=False)
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(6)]
    margin = env.boundary_margin
    lo, hi = env.lo - margin, env.hi + margin

    rng = np.random.default_rng(seeds[1])
    z_starts = sample_ball(rng, n_rollouts, radius=0.97)
    z_goals = sample_ball(rng, n_rollouts, radius=0.97)
    starts = m.inverse(z_starts)
    goals = m.inverse(z_goals)
    times = np.linspace(0.0, horizon_lam / lam, n_times)
    trajs = [
        rollout_analytic(m, starts[i], goals[i], cfg, times) for i in range(n_rollouts)
    ]

    grid_side = np.linspace(lo[0], hi[0], n_grid), np.linspace(lo[1], hi[1], n_grid)
    gx, gy = np.meshgrid(*grid_side, indexing="ij")
    grid_pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    rngg = np.random.default_rng(seeds[2])
    vel_goals = m.inverse(sample_ball(rngg, n_goals, radius=0.9))
    barrier_samples = m.inverse(sample_ball(np.random.default_rng(seeds[3]), n_barrier, radius=1.0))

    reports = [
        check_bilip(m, lo, hi, pairs, seeds[0]),
        check_ball_invariance(m, trajs),
        check_convergence(trajs, m.cert_bounds(), lam),
        check_velocity(m, lam, grid_pts, vel_goals, cfg),
        check_finite_time_band(m, lam, grid_pts, vel_goals, cfg),
        check_barrier(m, lam, barrier_samples, vel_goals, seeds[4]),
        check_safety_env(env, trajs, threshold=safety_threshold),
    ]
    if tracking:
        reports.append(_tracking_report(m, lam, seeds[5]))
    return reports


def _tracking_report(m, lam, seed, z_radius=0.3, omega=0.3, T=None):
    """Circular-goal tracking rollout and its bound check."""
    from .flow import piecewise_linear_path, tracking_rollout

    rng = np.random.default_rng(seed)
    T = 2 * np.pi / omega if T is None else T
    h = 1e-3 / lam
    dense_t = np.linspace(0.0, T, 4096)
    zs = z_radius * np.stack([np.cos(omega * dense_t), np.sin(omega * dense_t)], axis=1)
    waypoints = m.inverse(zs)
    path = piecewise_linear_path(dense_t, waypoints)
    x0 = m.inverse(sample_ball(rng, 1, radius=0.9))[0]
    cfg = FlowConfig(lam=lam, h=h, cond_check=False)
    traj = tracking_rollout(m, x0, path, T, cfg)
    return check_tracking(m, traj, lam)
