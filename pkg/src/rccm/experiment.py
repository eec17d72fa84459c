"""The quadrotor benchmark protocol: tasks, learning tiers and the run matrix."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import benchmark_disturbance, quadrotor_model
from .estimator import empirical_eeb_calibration
from .learner import TrainConfig, init_net, make_dataset_tiers, train
from .planner import PlannerConfig, TaskSpec, plan_flat, save_plan_params
from .sim import ScenarioConfig, data_path, resolve, run_scenario, tomllib

log = logging.getLogger(__name__)

TIERS = ("none", "poor", "moderate", "good")
MATRIX_CONTROLLERS = ("rd-ccm", "ccm-learned")
TASKS_SCHEMA = "rccm-tasks/1"


@dataclass
class Benchmark:
    tasks: list
    obstacles: list
    features: tuple = (0, 1, 3, 4)
    hidden: tuple = (32, 32, 32, 32)
    low_vz_limit: float = 0.6
    stride: int = 20
    grid_count: int = 13
    train: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)
    delta_emp: float = None

    def task(self, name) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}")


def load_benchmark(path="builtin:tasks.toml") -> Benchmark:
    p = resolve(path)
    with open(p, "rb") as fh:
        data = tomllib.load(fh)
    if data.get("schema") != TASKS_SCHEMA:
        raise ValueError(f"{p}: expected schema {TASKS_SCHEMA!r}")
    obstacles = [tuple(o) for o in data["obstacles"]]
    tasks = [TaskSpec(t["name"], t["start"], t["goal"], obstacles, t.get("actual_start"))
             for t in data["task"]]
    learn = data.get("learner", {})
    bench = Benchmark(tasks, obstacles, tuple(learn.get("features", (0, 1, 3, 4))),
                      tuple(learn.get("hidden", (32, 32, 32, 32))), float(data.get("low_vz_limit", 0.6)),
                      int(learn.get("stride", 20)), int(learn.get("grid_count", 13)),
                      dict(data.get("train", {})), dict(data.get("planner", {})))
    cal = data_path("calibration.json")
    if path == "builtin:tasks.toml" and cal.exists():
        bench.delta_emp = json.loads(cal.read_text())["delta_emp"]
    return bench


def planner_config(bench: Benchmark, **kw) -> PlannerConfig:
    opts = dict(bench.planner)
    opts.update(kw)
    return PlannerConfig(**opts)


def scenario_for(bench: Benchmark, task: str, tier: str, controller: str = "rd-ccm",
                 data_dir=None, **overrides) -> ScenarioConfig:
    """Scenario for one matrix cell using the plan and model files of a tier."""
    t = bench.task(task)
    join = (lambda name: f"builtin:{name}") if data_dir is None else (lambda name: str(Path(data_dir) / name))
    kw = dict(name=f"{task}-{tier}-{controller}", controller=controller,
              task=dict(name=t.name, start=t.start, goal=t.goal, obstacles=t.obstacles,
                        actual_start=t.actual_start),
              plan=join(f"plans/{task}_{tier}.json"),
              learner="" if tier == "none" else join(f"models/{tier}.json"),
              metric=join("quadrotor_metric.json"), mode="acceptance")
    if bench.delta_emp is not None:
        kw["delta_emp"] = bench.delta_emp
    kw.update(overrides)
    return ScenarioConfig(**kw)


def matrix_cells(bench: Benchmark, tasks=None, tiers=TIERS, controllers=MATRIX_CONTROLLERS, data_dir=None,
                 **overrides):
    tasks = tasks or [t.name for t in bench.tasks]
    return [((task, tier, ctrl), scenario_for(bench, task, tier, ctrl, data_dir, **overrides))
            for task in tasks for tier in tiers for ctrl in controllers]


# ----------------------------------------------------------- artifact build

def build_artifacts(bench: Benchmark, out_dir, metric_path, progress=print):
    """Calibrate, collect data, train the tiers and plan every task for every tier.

    Writes plans/, models/ and calibration.json under ``out_dir``; the metric
    file is copied there first.  Deterministic for fixed configuration.
    """
    out = Path(out_dir)
    (out / "plans").mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(parents=True, exist_ok=True)
    metric_dst = out / "quadrotor_metric.json"
    if Path(metric_path).resolve() != metric_dst.resolve():
        metric_dst.write_text(Path(metric_path).read_text())
    model = quadrotor_model()
    dist = benchmark_disturbance()

    def make_plan(task, tier, dhat, cfg=None, name=None, init=None):
        cfg = cfg or planner_config(bench)
        traj = plan_flat(task, model, dhat, cfg, init=init)
        save_plan_params(traj, out / "plans" / f"{name or task.name}_{tier}.json", tier=tier)
        progress(f"plan {task.name}/{tier}: T_a={traj.arrival_time:.3f} s, J={traj.cost:.3f}")
        return traj

    none_plans = {t.name: make_plan(t, "none", None) for t in bench.tasks}

    # calibration on task 1 with a provisional bound equal to the target EEB
    t1 = bench.tasks[0].name
    provisional = scenario_for(bench, t1, "none", data_dir=out, delta_source="fixed", delta_fixed=0.1,
                               mode="exploratory")
    delta_emp = empirical_eeb_calibration([provisional])
    (out / "calibration.json").write_text(json.dumps(
        {"delta_emp": delta_emp, "scenario": provisional.name, "T": provisional.T, "a": provisional.a,
         "safety": provisional.safety}, indent=1))
    bench.delta_emp = delta_emp
    progress(f"calibrated delta_emp = {delta_emp:.4f}")

    runs = [run_scenario(scenario_for(bench, t.name, "none", data_dir=out, mode="exploratory"))
            for t in bench.tasks]
    low_cfg = planner_config(bench, box_override={4: (-bench.low_vz_limit, bench.low_vz_limit)})
    low_runs = []
    for t in bench.tasks:
        make_plan(t, "lowvz", None, low_cfg)
        low_runs.append(run_scenario(scenario_for(bench, t.name, "lowvz", data_dir=out, learner="",
                                                   mode="exploratory")))
    tiers = make_dataset_tiers(runs, low_runs, model, dist, bench.features, bench.stride, bench.grid_count)
    dims = [len(bench.features), *bench.hidden, model.input_dim]
    tcfg = TrainConfig(**bench.train)
    for name, data in tiers.items():
        net = init_net(dims, model.lipschitz_d, seed=tcfg.seed, features=bench.features)
        net, curve = train(net, data, tcfg)
        net.save(out / "models" / f"{name}.json")
        progress(f"model {name}: {len(data)} samples, final loss {curve[-1]:.3e}")
        for t in bench.tasks:
            make_plan(t, name, net, init=none_plans[t.name].params)
    return delta_emp


def transient_end(log_, level=0.05) -> float:
    """Time after which the exponential deviation bound R |x(0) - x*(0)| e^{-lam t} is below ``level``."""
    m = log_.meta
    R = math.sqrt(m["alpha2"] / m["alpha1"])
    e0 = float(np.linalg.norm(log_.x[0] - log_.x_star[0]))
    if R * e0 <= level:
        return 0.0
    return math.log(R * e0 / level) / m["lam"]


def post_transient_deviation(log_, level=0.05) -> float:
    """Largest position deviation from the plan after ``transient_end``; nan if the run ends first."""
    mask = log_.t >= transient_end(log_, level)
    if not mask.any():
        return float("nan")
    return float(log_.position_deviation()[mask].max())


def plan_prechecks(bench: Benchmark, data_dir=None, count=9):
    """Input-admissibility and tube checks of every shipped plan, keyed by (task, tier)."""
    from .controller import check_feasible_plan, disturbance_range_box
    from .learner import SnMlp
    from .metric import MetricPolynomial
    from .planner import materialize
    from .sim import load_plan_params

    base = (lambda name: f"builtin:{name}") if data_dir is None else (lambda name: str(Path(data_dir) / name))
    model = quadrotor_model()
    box = disturbance_range_box(model, benchmark_disturbance(), count)
    metric = MetricPolynomial.load(resolve(base("quadrotor_metric.json")))
    R = math.sqrt(metric.alpha2 / metric.alpha1)
    out = {}
    for t in bench.tasks:
        for tier in TIERS:
            params, _ = load_plan_params(resolve(base(f"plans/{t.name}_{tier}.json")))
            dhat = None if tier == "none" else SnMlp.load(resolve(base(f"models/{tier}.json")))
            traj = materialize(params, t, model, dhat)
            x0 = traj.x_star[0].copy()
            x0[:2] = t.actual_start
            out[t.name, tier] = check_feasible_plan(model, dhat, traj, x0=x0, overshoot=R, lam=metric.lam,
                                                    dist_box=box)
    return out


def tier_rmse(net, model, dist, features, count=9):
    """RMSE of a learned model against the true field on a held-out grid."""
    from .learner import grid_dataset
    ds = grid_dataset(model, dist, features, count)
    pred = net.__class__.__call__(net, _embed(ds.inputs, features, model)) if net is not None else 0.0
    return float(np.sqrt(np.mean(np.sum((ds.targets - pred) ** 2, axis=1))))


def _embed(F, features, model):
    X = np.tile(model.x_box.mean(axis=1), (len(F), 1))
    X[:, list(features)] = F
    return X
