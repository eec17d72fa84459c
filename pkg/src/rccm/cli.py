"""Command line entry point: ``rccm <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .dynamics import benchmark_disturbance, quadrotor_model
from .learner import SnMlp, TrainConfig, dataset_from_logs, grid_dataset, init_net, train
from .metric import MetricPolynomial, box_grid, verify_dual_ccm
from .planner import plan_flat, save_plan_csv, save_plan_params
from .report import emit_report, load_logs, run_summary, write_log_csv
from .sim import (AcceptanceBreach, ScenarioConfig, breaches, resolve, run_experiment_matrix, run_scenario,
                  tomllib)

MATRIX_SCHEMA = "rccm-matrix/1"


def cmd_verify_metric(args):
    model = quadrotor_model()
    metric = MetricPolynomial.load(resolve(args.metric))
    axes = [model.state_names.index(a) for a in args.axes.split(",")]
    grid = box_grid(model, axes, int(args.grid))
    rep = verify_dual_ccm(metric, model, grid, lam=metric.lam)
    out = dict(rep.to_dict(), passed=bool(rep.passed()))
    print(json.dumps(out, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=1))
    return 0 if rep.passed() else 1


def cmd_plan(args):
    bench = experiment.load_benchmark(args.tasks)
    task = bench.task(args.task)
    model = quadrotor_model()
    dhat = None
    if args.model:
        dhat = SnMlp.load(resolve(args.model))
    cfg = experiment.planner_config(bench)
    traj = plan_flat(task, model, dhat, cfg)
    out = Path(args.out or f"{task.name}_plan.json")
    save_plan_params(traj, out)
    save_plan_csv(traj, out.with_suffix(".csv"))
    print(f"{task.name}: arrival {traj.arrival_time:.3f} s, cost {traj.cost:.3f} -> {out}")
    return 0


def cmd_train(args):
    bench = experiment.load_benchmark(args.tasks)
    model = quadrotor_model()
    dist = benchmark_disturbance(model.lipschitz_d, model.bound_d)
    if args.tier == "good":
        data = grid_dataset(model, dist, bench.features, bench.grid_count)
    else:
        logs = load_logs(args.logs)
        if not logs:
            print(f"no logs in {args.logs}", file=sys.stderr)
            return 2
        data = dataset_from_logs(logs, bench.features, bench.stride)
    opts = dict(bench.train)
    if args.epochs:
        opts["epochs"] = args.epochs
    tcfg = TrainConfig(**opts)
    net = init_net([len(bench.features), *bench.hidden, model.input_dim], model.lipschitz_d,
                   seed=tcfg.seed, features=bench.features)
    net, curve = train(net, data, tcfg)
    out = Path(args.out or f"{args.tier}.json")
    net.save(out)
    print(f"tier {args.tier}: {len(data)} samples, final loss {curve[-1]:.4e}, "
          f"Lipschitz product {net.lipschitz_product():.6f} -> {out}")
    return 0


def _finish(logs, outdir, mode_of):
    status = 0
    if outdir:
        path = emit_report(logs, outdir)
        print(f"report: {path}")
    for lg in logs:
        s = run_summary(lg)
        print(f"{lg.name}: cost {s['cost']:.3f}, slope {s['decay_slope']:.3f}, "
              f"max deviation {s['max_position_deviation']:.4f}")
        if mode_of(lg) == "acceptance":
            for b in breaches(lg):
                print(f"BREACH {lg.name}: {b}", file=sys.stderr)
                status = 1
    return status


def cmd_run(args):
    cfg = ScenarioConfig.load(args.scenario)
    if args.mode:
        cfg = cfg.replace(mode=args.mode)
    lg = run_scenario(cfg)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    status = _finish([lg], args.out, lambda _: cfg.mode)
    if not args.out:
        write_log_csv(lg, f"{lg.name}.csv")
    return status


def load_matrix(path):
    path = Path(path)
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    if data.get("schema") != MATRIX_SCHEMA:
        raise ValueError(f"{path}: expected schema {MATRIX_SCHEMA!r}")
    bench = experiment.load_benchmark(data.get("tasks_file", "builtin:tasks.toml"))
    data_dir = data.get("data_dir")
    if data_dir and not Path(data_dir).is_absolute():
        data_dir = str(path.parent / data_dir)
    cells = experiment.matrix_cells(bench, data.get("tasks"), tuple(data.get("tiers", experiment.TIERS)),
                                    tuple(data.get("controllers", experiment.MATRIX_CONTROLLERS)),
                                    data_dir, **data.get("overrides", {}))
    return cells


def cmd_matrix(args):
    cells = load_matrix(args.config)
    modes = {cfg.name: cfg.mode for _, cfg in cells}
    results, errors = run_experiment_matrix(cells, args.workers)
    for key, err in errors.items():
        print(f"cell {'/'.join(key)} flagged: {err}", file=sys.stderr)
    logs = [lg for lg in results.values() if lg is not None]
    status = _finish(logs, args.out, lambda lg: modes[lg.name])
    return 1 if errors else status


def cmd_report(args):
    logs = load_logs(args.logdir)
    path = emit_report(logs, args.out or args.logdir)
    print(path.read_text())
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="rccm", description="RD-CCM tracking for the planar quadrotor")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify-metric", help="check the dual CCM conditions on a grid")
    s.add_argument("metric")
    s.add_argument("grid", type=int, help="points per gridded coordinate")
    s.add_argument("--axes", default="phi,v_x,v_z,phi_dot",
                   help="state coordinates to grid; the rest sit at the box centre")
    s.add_argument("--out")
    s.set_defaults(func=cmd_verify_metric)

    s = sub.add_parser("plan", help="plan a task (optionally with a learned model)")
    s.add_argument("task")
    s.add_argument("--model")
    s.add_argument("--tasks", default="builtin:tasks.toml")
    s.add_argument("--out")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("train", help="train a tier model from run logs")
    s.add_argument("logs", help="directory of run CSV logs (ignored for the good tier)")
    s.add_argument("--tier", required=True, choices=("poor", "moderate", "good"))
    s.add_argument("--tasks", default="builtin:tasks.toml")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("run", help="run one scenario")
    s.add_argument("scenario")
    s.add_argument("--out", help="directory for the log and summary")
    s.add_argument("--mode", choices=("acceptance", "exploratory"))
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("matrix", help="run the tasks x tiers x controllers matrix")
    s.add_argument("config")
    s.add_argument("--out", default="matrix_out")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_matrix)

    s = sub.add_parser("report", help="summarise a directory of logs")
    s.add_argument("logdir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="warn")
    try:
        return args.func(args)
    except AcceptanceBreach as exc:
        print(f"BREACH {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
