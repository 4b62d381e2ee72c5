"""Pipeline entry point: gen-data, train, plan, verify, export-plots.

Exit codes: 0 ok, 1 asserted check failure, 2 input error, 3 numerical failure.
Every file written carries a version field and the invoking configuration.
All subcommands are deterministic for a fixed seed (single-threaded; --threads
is accepted for interface stability but execution always uses one thread).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import plots
from .bilip import BiLipMap, NonConvergence, PlannerModel
from .env import load_environment
from .flow import (
    FlowConfig,
    NumericalFailure,
    Trajectory,
    gradient_flow_field,
    finite_time_field,
    integrate_field,
    natural_field,
    piecewise_linear_path,
    rollout_analytic,
    tracking_rollout,
)
from .roadmap import (
    assemble_datasets,
    build_knn_graph,
    cost_to_go,
    default_delta,
    default_step_size,
    load_datasets,
    rrt_grow,
    save_datasets,
)
from .train import TrainConfig, calibrate_level, separation_margins, suggest_out_scale, train
from .verify import any_asserted_failure, run_full_suite, save_reports

FILE_VERSION = 1


def _parse_point(text: str) -> np.ndarray:
    try:
        return np.asarray([float(v) for v in text.split(",")], dtype=float)
    except ValueError as e:
        raise ValueError(f"cannot parse point {text!r}; expected 'x,y'") from e


def _config_dict(args: argparse.Namespace) -> dict:
    return {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "func" and not k.startswith("_")
    }


def _write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def cmd_gen_data(args) -> int:
    env = load_environment(args.env)
    goal = _parse_point(args.goal)
    if not env.is_safe(goal):
        raise ValueError("goal unsafe: it must lie in the safe set")
    step = args.step if args.step is not None else default_step_size(env)
    ss = np.random.SeedSequence(args.seed)
    rrt_seed, unsafe_seed = ss.spawn(2)

    nodes = rrt_grow(env, goal, args.safe_count, step, rrt_seed)
    roadmap = build_knn_graph(env, nodes, args.k)
    labels = cost_to_go(roadmap)
    unsafe = env.sample_unsafe(args.unsafe_count, unsafe_seed)
    finite = labels[np.isfinite(labels)]
    delta = args.delta if args.delta is not None else default_delta(float(finite.max()))
    ds = assemble_datasets(nodes, labels, unsafe, delta)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_datasets(ds, out / "datasets.jsonl")
    _write_json(
        out / "summary.json",
        {
            "version": FILE_VERSION,
            "config": _config_dict(args),
            "M": ds.M,
            "N": ds.N,
            "c_bar": ds.c_bar,
            "delta": ds.delta,
            "dropped": ds.dropped,
            "goal": goal.tolist(),
            "step_size": step,
        },
    )
    print(f"gen-data: M={ds.M} N={ds.N} c_bar={ds.c_bar:.4f} delta={ds.delta:.4f} "
          f"dropped={ds.dropped} -> {out}")
    return 0


def cmd_train(args) -> int:
    ds = load_datasets(args.data)
    goal = ds.safe[int(np.argmin(ds.safe_labels))]
    out_scale = (
        suggest_out_scale(ds, goal, args.lam)
        if args.out_scale is None
        else float(args.out_scale)
    )
    m = BiLipMap(
        n=ds.safe.shape[1],
        depth=args.depth,
        hidden=args.hidden,
        tau=args.tau,
        out_scale=out_scale,
        seed=args.seed,
    ).set_goal_center(goal)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        rho=args.rho,
        lam=args.lam,
        seed=args.seed,
    )
    m, report = train(m, ds, cfg)
    c, m = calibrate_level(m, ds, args.lam)
    report.level_c = c
    report.ball_scale = m.ball_scale

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = PlannerModel(
        map=m, lam=args.lam, level_c=c,
        meta={"version": FILE_VERSION, "config": _config_dict(args)},
    )
    model.save(out / "model.json")
    _write_json(out / "report.json",
                {"version": FILE_VERSION, "config": _config_dict(args), **report.to_dict()})
    report.save_loss_csv(out / "loss.csv")
    margins = separation_margins(m, ds, args.lam)
    print(
        f"train: final loss {report.loss_total[-1]:.3e}, "
        f"safe ok {margins['frac_safe_ok']:.2%}, unsafe ok {margins['frac_unsafe_ok']:.2%}, "
        f"c={c:.4f}, r={m.ball_scale:.4f}, {report.seconds:.1f}s -> {out}"
    )
    return 0


def _load_goal_path(path_file):
    with open(path_file) as fh:
        d = json.load(fh)
    return piecewise_linear_path(d["times"], d["points"]), float(max(d["times"]))


def cmd_plan(args) -> int:
    model = PlannerModel.load(args.model)
    m = model.map
    lam = model.lam if args.lam is None else args.lam
    cfg = FlowConfig(lam=lam, tol=args.tol, h=args.h)
    start = _parse_point(args.start)
    if np.linalg.norm(m.forward(start)) > 1.0:
        warnings.warn("start maps outside the unit ball: convergence holds, safety does not")

    if args.goal_path is not None:
        path, t_end = _load_goal_path(args.goal_path)
        T = args.t_end if args.t_end is not None else t_end
        traj = tracking_rollout(m, start, path, T, cfg)
    else:
        goal = _parse_point(args.goal)
        if np.linalg.norm(m.forward(goal)) > 1.0:
            warnings.warn("goal maps outside the unit ball: convergence holds, safety does not")
        T = args.t_end if args.t_end is not None else 8.0 / lam
        if args.method == "analytic":
            times = np.linspace(0.0, T, args.samples)
            traj = rollout_analytic(m, start, goal, cfg, times)
        else:
            fields = {
                "rk4": natural_field,
                "finite-time": finite_time_field,
                "gradient-baseline": gradient_flow_field,
            }
            fieldfn = fields[args.method]
            traj = integrate_field(
                lambda t, x: fieldfn(m, x, goal, cfg), start, T, cfg,
                goal=goal, method=args.method,
            )
    payload = traj.to_dict()
    payload["version"] = FILE_VERSION
    payload["config"] = _config_dict(args)
    _write_json(args.out, payload)
    print(f"plan: {len(traj.times)} samples, method={args.method} -> {args.out}")
    return 0


def cmd_verify(args) -> int:
    model = PlannerModel.load(args.model)
    env = load_environment(args.env)
    reports = run_full_suite(
        model, env,
        seed=args.seed,
        pairs=args.pairs,
        n_rollouts=args.rollouts,
        n_grid=args.grid,
        n_goals=args.goals,
        n_barrier=args.barrier_samples,
        tracking=not args.no_tracking,
    )
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(
                {
                    "version": FILE_VERSION,
                    "config": _config_dict(args),
                    "reports": [r.to_dict() for r in reports],
                },
                fh,
                indent=2,
            )
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        kind = "asserted" if r.asserted else "reported"
        print(f"  {r.name:<26} {status}  margin={r.margin:+.3e} ({kind})")
    if any_asserted_failure(reports):
        print("verify: FAILED")
        return 1
    print("verify: ok")
    return 0


def cmd_export_plots(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    env = load_environment(args.env) if args.env else None
    model = PlannerModel.load(args.model) if args.model else None
    trajs = [Trajectory.load(p) for p in args.traj]

    wrote = []
    if model is not None and env is not None:
        plots.export_boundary(out / "boundary.svg", env, model.map)
        wrote.append("boundary.svg")
    if trajs and env is not None:
        goals = [t.goal for t in trajs if t.goal is not None]
        plots.export_trajectories(out / "trajectories.svg", env, trajs, goals)
        wrote.append("trajectories.svg")
    if trajs and model is not None:
        plots.export_z_space(out / "z_space.svg", model.map, trajs)
        wrote.append("z_space.svg")
    if args.data and env is not None:
        ds = load_datasets(args.data)
        plots.export_cost_contours(out / "cost_contours.svg", env, ds.safe, ds.safe_labels)
        wrote.append("cost_contours.svg")
    if not wrote:
        raise ValueError("nothing to export: pass --model/--env, --traj, or --data")
    print(f"export-plots: wrote {', '.join(wrote)} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safeflow", description=__doc__)
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads (accepted; execution is single-threaded)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="grow RRT, label with Dijkstra, write datasets")
    g.add_argument("--env", default="corridor-v1", help="preset name or environment JSON")
    g.add_argument("--goal", required=True, help="goal point 'x,y' (RRT root)")
    g.add_argument("--safe-count", type=int, default=2500)
    g.add_argument("--unsafe-count", type=int, default=2500)
    g.add_argument("--k", type=int, default=10, help="nearest neighbors in the graph")
    g.add_argument("--step", type=float, default=None, help="RRT step (default 5%% of diagonal)")
    g.add_argument("--delta", type=float, default=None, help="unsafe label margin (default 0.1*c_bar)")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit the ball-mapping network and calibrate the level")
    t.add_argument("--data", required=True, help="datasets.jsonl from gen-data")
    t.add_argument("--epochs", type=int, default=1500)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--rho", type=float, default=0.0, help="demonstration loss weight")
    t.add_argument("--lam", type=float, default=1.0)
    t.add_argument("--depth", type=int, default=4)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--tau", type=float, default=0.5)
    t.add_argument("--out-scale", type=float, default=None,
                   help="output scale (default: fitted to the label scale)")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pl = sub.add_parser("plan", help="generate a trajectory from a trained model")
    pl.add_argument("--model", required=True)
    pl.add_argument("--start", required=True, help="'x,y'")
    pl.add_argument("--goal", help="'x,y' (fixed goal)")
    pl.add_argument("--goal-path", help="JSON file {times:[], points:[[x,y],..]}")
    pl.add_argument("--method", default="analytic",
                    choices=["analytic", "rk4", "finite-time", "gradient-baseline"])
    pl.add_argument("--t-end", type=float, default=None)
    pl.add_argument("--samples", type=int, default=200, help="samples for analytic rollouts")
    pl.add_argument("--h", type=float, default=None, help="RK4 step")
    pl.add_argument("--tol", type=float, default=1e-9, help="inversion tolerance")
    pl.add_argument("--lam", type=float, default=None, help="override the model's rate")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plan)

    v = sub.add_parser("verify", help="run the certificate suite on a trained model")
    v.add_argument("--model", required=True)
    v.add_argument("--env", default="corridor-v1")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--pairs", type=int, default=10**5)
    v.add_argument("--rollouts", type=int, default=100)
    v.add_argument("--grid", type=int, default=100)
    v.add_argument("--goals", type=int, default=10)
    v.add_argument("--barrier-samples", type=int, default=10**4)
    v.add_argument("--no-tracking", action="store_true")
    v.add_argument("--out", default=None, help="certificate report JSON")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("export-plots", help="write SVG/JSON plot data")
    e.add_argument("--env", default=None)
    e.add_argument("--model", default=None)
    e.add_argument("--data", default=None, help="datasets.jsonl for cost contours")
    e.add_argument("--traj", action="append", default=[], help="trajectory JSON (repeatable)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export_plots)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    if args.command == "plan" and (args.goal is None) == (args.goal_path is None):
        print("error: plan needs exactly one of --goal or --goal-path", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (NonConvergence, NumericalFailure, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
