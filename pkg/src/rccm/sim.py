"""Closed-loop simulation: scenario configuration, the control loop and run logs."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .controller import build_rre_terms, min_norm_control, nominal_ccm_control
from .dynamics import (DivergedError, QuadrotorParams, constant_disturbance, benchmark_disturbance,
                       quadrotor_model, zero_disturbance)
from .estimator import compute_eeb, compute_phi, eeb_params_for, init_estimator, predictor_step, sample_update
from .geodesic import GeodesicSolver, GeodesicSolverConfig
from .learner import SnMlp
from .metric import MetricPolynomial
from .planner import PlanParams, TaskSpec, materialize

log = logging.getLogger(__name__)

SCENARIO_SCHEMA = "rccm-scenario/1"
CONTROLLERS = ("rd-ccm", "ccm-learned", "ccm-nominal")
DELTA_SOURCES = ("empirical", "theoretical", "fixed")


class AcceptanceBreach(RuntimeError):
    def __init__(self, name, breaches):
        super().__init__(f"{name}: " + "; ".join(breaches))
        self.breaches = breaches


def data_path(name) -> Path:
    return Path(resources.files("rccm") / "data" / name)


def resolve(path, base=None) -> Path:
    """``builtin:<name>`` refers to the packaged data directory."""
    path = str(path)
    if path.startswith("builtin:"):
        return data_path(path[len("builtin:"):])
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = Path(base) / p
    return p


# ------------------------------------------------------------------ config

@dataclass
class ScenarioConfig:
    name: str = "scenario"
    model: dict = field(default_factory=dict)  # QuadrotorParams fields
    disturbance: str = "benchmark"  # benchmark | zero | constant
    disturbance_value: tuple = (0.0, 0.0)
    metric: str = "builtin:quadrotor_metric.json"
    controller: str = "rd-ccm"
    lam: float = None  # defaults to the metric's rate
    delta_source: str = "empirical"
    delta_emp: float = 0.02
    delta_fixed: float = 0.1
    a: float = 10.0
    T: float = 0.002
    safety: float = 2.0
    learner: str = ""  # model file; empty means no learning
    task: dict = field(default_factory=dict)  # TaskSpec fields
    plan: str = ""  # plan parameter file (json)
    settle: float = 3.0  # hover time after arrival
    horizon: float = 0.0  # 0 means arrival + settle
    dt: float = 0.0005
    seed: int = 0
    mode: str = "exploratory"  # or acceptance
    x0: tuple = ()  # overrides the task's actual start (full state)
    geodesic: dict = field(default_factory=dict)
    base_dir: str = ""

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if self.delta_source not in DELTA_SOURCES:
            raise ValueError(f"delta_source must be one of {DELTA_SOURCES}")
        ratio = self.T / self.dt
        if self.dt <= 0 or self.T <= 0 or abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError("the sampling period T must be an integer multiple of dt")
        if self.mode not in ("acceptance", "exploratory"):
            raise ValueError("mode must be 'acceptance' or 'exploratory'")

    @property
    def steps_per_sample(self) -> int:
        return int(round(self.T / self.dt))

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def with_estimator(self, a=None, T=None) -> "ScenarioConfig":
        return self.replace(a=self.a if a is None else a, T=self.T if T is None else T)

    @classmethod
    def from_dict(cls, data, base_dir=""):
        data = dict(data)
        schema = data.pop("schema", None)
        if schema != SCENARIO_SCHEMA:
            raise ValueError(f"scenario schema must be {SCENARIO_SCHEMA!r}, got {schema!r}")
        flat = {}
        for k, v in data.items():
            if k in ("controller", "estimator") and isinstance(v, dict):
                for kk, vv in v.items():
                    flat["controller" if kk == "kind" else kk] = vv
            else:
                flat[k] = v
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(flat) - names
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        for key in ("disturbance_value", "x0"):
            if key in flat:
                flat[key] = tuple(flat[key])
        flat.setdefault("base_dir", str(base_dir))
        return cls(**flat)

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh), base_dir=path.parent)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d["schema"] = SCENARIO_SCHEMA
        return d

    def to_toml(self) -> str:
        """TOML text that ``load`` reads back to an equal configuration (unset fields omitted)."""
        d = self.to_dict()
        lines = [f"schema = {_toml_value(d.pop('schema'))}"]
        tables = {k: d.pop(k) for k in ("model", "geodesic", "task")}
        lines += [f"{k} = {_toml_value(v)}" for k, v in d.items() if v is not None and v != ()]
        for name, table in tables.items():
            items = [(k, v) for k, v in table.items() if v is not None]
            if items:
                lines += ["", f"[{name}]"] + [f"{k} = {_toml_value(v)}" for k, v in items]
        return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float, np.integer, np.floating)):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(int(v))
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


# --------------------------------------------------------------------- log

LOG_VECTORS = {"x": 6, "x_star": 6, "u": 2, "u_star": 2, "d_check": 2, "d": 2}
LOG_SCALARS = ("delta", "delta_theory", "E", "rre_slack", "true_slack", "geo_iters", "geo_converged",
               "saturated", "active", "in_box")


@dataclass
class TrajectoryLog:
    name: str
    t: np.ndarray
    x: np.ndarray
    x_star: np.ndarray
    u: np.ndarray
    u_star: np.ndarray
    d_check: np.ndarray
    d: np.ndarray
    delta: np.ndarray
    delta_theory: np.ndarray
    E: np.ndarray
    rre_slack: np.ndarray
    true_slack: np.ndarray
    geo_iters: np.ndarray
    geo_converged: np.ndarray
    saturated: np.ndarray
    active: np.ndarray
    in_box: np.ndarray
    diverged: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def energy_slope(self) -> np.ndarray:
        """Finite-difference d(log E)/dt between consecutive rows (nan where E <= 1e-6)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.where(self.E > 1e-6, np.log(np.maximum(self.E, 1e-300)), np.nan)
        return np.concatenate([[np.nan], np.diff(lg) / np.diff(self.t)])

    def estimation_error(self) -> np.ndarray:
        return np.linalg.norm(self.d_check - self.d, axis=1)

    def position_deviation(self) -> np.ndarray:
        return np.linalg.norm(self.x[:, :2] - self.x_star[:, :2], axis=1)

    def columns(self):
        cols, blocks = ["t"], [self.t[:, None]]
        for key, n in LOG_VECTORS.items():
            cols += [f"{key}_{k}" for k in range(n)]
            blocks.append(getattr(self, key))
        for key in LOG_SCALARS:
            cols.append(key)
            blocks.append(np.asarray(getattr(self, key), dtype=float)[:, None])
        cols.append("E_slope")
        blocks.append(self.energy_slope[:, None])
        return cols, np.hstack(blocks)

    def equals(self, other: "TrajectoryLog") -> bool:
        """Bitwise equality of every logged array."""
        a, b = self.columns()[1], other.columns()[1]
        return a.shape == b.shape and a.tobytes() == b.tobytes()


def energy_decay_slope(log_: TrajectoryLog, floor=1e-6) -> float:
    """Least-squares slope of log E against t over rows with E > floor."""
    mask = log_.E > floor
    if mask.sum() < 2:
        return float("nan")
    return float(np.polyfit(log_.t[mask], np.log(log_.E[mask]), 1)[0])


# -------------------------------------------------------------- assembly

@lru_cache(maxsize=8)
def _phi_for(params: QuadrotorParams, bound_d: float) -> float:
    model = quadrotor_model(params)
    # the drift does not depend on position, so those axes collapse to one point
    return compute_phi(model, bound_d, [1, 1] + [9] * (model.state_dim - 2 + model.input_dim))


@lru_cache(maxsize=16)
def _load_metric(path) -> MetricPolynomial:
    return MetricPolynomial.load(path)


@lru_cache(maxsize=32)
def _load_learner(path) -> SnMlp:
    return SnMlp.load(path)


def build_disturbance(cfg: ScenarioConfig, model):
    if cfg.disturbance == "benchmark":
        return benchmark_disturbance(model.lipschitz_d, model.bound_d)
    if cfg.disturbance == "zero":
        return zero_disturbance(model.input_dim)
    if cfg.disturbance == "constant":
        return constant_disturbance(cfg.disturbance_value)
    raise ValueError(f"unknown disturbance {cfg.disturbance!r}")


def load_plan_params(path):
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != "rccm-plan/1":
        raise ValueError(f"{path}: unsupported plan format {data.get('format')!r}")
    return PlanParams.from_dict(data["params"]), data


def assemble(cfg: ScenarioConfig):
    """Model, disturbance, metric, learned model, task and sampled plan for a scenario."""
    params = QuadrotorParams(**cfg.model)
    model = quadrotor_model(params)
    dist = build_disturbance(cfg, model)
    metric_path = resolve(cfg.metric, cfg.base_dir)
    if not metric_path.exists():
        raise FileNotFoundError(metric_path)
    metric = _load_metric(str(metric_path))
    dhat = None
    if cfg.learner:
        lp = resolve(cfg.learner, cfg.base_dir)
        if not lp.exists():
            raise FileNotFoundError(lp)
        dhat = _load_learner(str(lp))
    task = TaskSpec(**cfg.task)
    if not cfg.plan:
        raise ValueError("scenario needs a plan file")
    pp = resolve(cfg.plan, cfg.base_dir)
    params_, _ = load_plan_params(pp)
    hold = cfg.settle if cfg.horizon <= 0 else max(0.0, cfg.horizon - params_.arrival_time)
    plan = materialize(params_, task, model, dhat, hold=hold + 0.01)
    horizon = cfg.horizon if cfg.horizon > 0 else params_.arrival_time + cfg.settle
    # whole number of sampling periods
    horizon = math.ceil(horizon / cfg.T - 1e-9) * cfg.T
    return model, dist, metric, dhat, task, plan, horizon


def initial_state(cfg: ScenarioConfig, task: TaskSpec, plan):
    if cfg.x0:
        return np.array(cfg.x0, dtype=float)
    x0 = plan.x_star[0].copy()
    x0[:2] = task.actual_start
    return x0


# -------------------------------------------------------------------- loop

def run_scenario(cfg: ScenarioConfig) -> TrajectoryLog:
    """Fixed-step closed loop; deterministic for a given configuration."""
    model, dist, metric, dhat, task, plan, horizon = assemble(cfg)
    lam = metric.lam if cfg.lam is None else cfg.lam
    dt = cfg.dt
    steps = int(round(horizon / dt))
    sps = cfg.steps_per_sample
    solver = GeodesicSolver(metric, GeodesicSolverConfig(**cfg.geodesic))
    eeb = eeb_params_for(model, _phi_for(model.params, model.bound_d), cfg.a, cfg.T)
    B = model.input_matrix(None)
    lo, hi = model.u_box[:, 0], model.u_box[:, 1]
    xlo, xhi = model.x_box[:, 0], model.x_box[:, 1]

    x = initial_state(cfg, task, plan)
    est = init_estimator(model, x, cfg.a, cfg.T)
    n = steps + 1
    rec = {k: np.full((n, m), np.nan) for k, m in LOG_VECTORS.items()}
    sc = {k: np.full(n, np.nan) for k in LOG_SCALARS}
    t_arr = np.arange(n) * dt
    diverged = False
    last = n
    u_hold = np.zeros(model.input_dim)

    def plant(xx):
        return model.drift(xx) + B @ (u_hold + dist(xx))

    for k in range(n):
        t = t_arr[k]
        if k > 0 and k % sps == 0:
            est = sample_update(est, model, x, t)
        xs, us, xds = plan.sample(t)
        try:
            curve = solver.solve(xs, x, warm_start="extrapolate")
        except Exception as exc:  # metric left its domain, singular system, ...
            log.error("%s: geodesic failure at t=%.4f: %s", cfg.name, t, exc)
            diverged, last = True, k
            break
        d_true = dist(x)
        if cfg.delta_source == "empirical":
            delta = cfg.delta_emp
        elif cfg.delta_source == "fixed":
            delta = cfg.delta_fixed
        else:
            delta = compute_eeb(eeb, t)
        if cfg.controller == "rd-ccm":
            terms = build_rre_terms(curve, metric, model, x, xs, us, xds, est.d_check, delta, lam)
            dec = min_norm_control(terms, us)
            d_used = est.d_check
        else:
            learned = dhat if cfg.controller == "ccm-learned" else None
            dec = nominal_ccm_control(curve, metric, model, learned, x, xs, us, xds, lam)
            terms = dec.terms
            d_used = np.zeros(model.input_dim) if learned is None else learned(x)
        u = np.clip(dec.u, lo, hi)
        sat = bool(np.any(u != dec.u))
        phi1 = terms.phi1
        du = u - us
        rec["x"][k], rec["x_star"][k], rec["u"][k], rec["u_star"][k] = x, xs, u, us
        rec["d_check"][k], rec["d"][k] = est.d_check, d_true
        sc["delta"][k] = delta
        sc["delta_theory"][k] = compute_eeb(eeb, t)
        sc["E"][k] = curve.energy
        sc["rre_slack"][k] = terms.phi0 + float(phi1 @ du)
        sc["true_slack"][k] = (terms.phi0 - terms.robust_term + float(phi1 @ du)
                               + float(phi1 @ (d_true - d_used)))
        sc["geo_iters"][k] = curve.iterations
        sc["geo_converged"][k] = curve.converged
        sc["saturated"][k] = sat
        sc["active"][k] = dec.constraint_active
        sc["in_box"][k] = bool(np.all(x >= xlo) and np.all(x <= xhi))
        if k == n - 1:
            break
        u_hold = u
        # plant and predictor share the RK4 stages so the predictor sees x(t) within the step
        k1 = plant(x)
        x2 = x + 0.5 * dt * k1
        k2 = plant(x2)
        x3 = x + 0.5 * dt * k2
        k3 = plant(x3)
        x4 = x + dt * k3
        k4 = plant(x4)
        x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        try:
            est = predictor_step(est, model, x, u, dt, stages=(x, x2, x3, x4))
        except FloatingPointError:
            diverged, last = True, k + 1
            break
        if not np.all(np.isfinite(x_next)):
            diverged, last = True, k + 1
            log.error("%s: %s", cfg.name, DivergedError("non-finite state", t))
            break
        x = x_next
    kw = {key: arr[:last] for key, arr in rec.items()}
    kw.update({key: arr[:last] for key, arr in sc.items()})
    meta = {"horizon": horizon, "dt": dt, "arrival_time": plan.arrival_time, "plan_cost": plan.cost,
            "controller": cfg.controller, "lam": lam, "alpha1": metric.alpha1, "alpha2": metric.alpha2,
            "task": task.name, "phi": eeb.phi}
    return TrajectoryLog(cfg.name, t_arr[:last], diverged=diverged, meta=meta, **kw)


def breaches(log_: TrajectoryLog, tol=1e-8):
    """Acceptance-mode invariant violations in a log."""
    out = []
    if log_.diverged:
        out.append("run diverged")
    if np.any(log_.saturated > 0):
        out.append(f"{int(np.sum(log_.saturated > 0))} input saturation events")
    if np.any(log_.in_box < 1):
        out.append(f"{int(np.sum(log_.in_box < 1))} rows outside the state box")
    if np.any(log_.geo_converged < 1):
        out.append(f"{int(np.sum(log_.geo_converged < 1))} unconverged geodesic solves")
    err = log_.estimation_error()
    bad = int(np.sum(err > log_.delta_theory))
    if bad:
        out.append(f"{bad} rows with estimation error above the theoretical bound")
    if log_.meta.get("controller") == "rd-ccm":
        viol = int(np.sum(log_.rre_slack > tol * np.maximum(1.0, log_.E)))
        if viol:
            out.append(f"{viol} rows violating the robust energy condition")
    return out


def run_checked(cfg: ScenarioConfig) -> TrajectoryLog:
    """run_scenario, raising AcceptanceBreach in acceptance mode."""
    lg = run_scenario(cfg)
    if cfg.mode == "acceptance":
        found = breaches(lg)
        if found:
            raise AcceptanceBreach(cfg.name, found)
    return lg


# ------------------------------------------------------------------ matrix

def thread_cap(default=None) -> int:
    env = os.environ.get("RCCM_THREADS")
    if env:
        return max(1, int(env))
    return default or (os.cpu_count() or 1)


def _run_cell(item):
    key, cfg = item
    try:
        return key, run_scenario(cfg), None
    except Exception as exc:  # a failed cell must not stop the matrix
        return key, None, f"{type(exc).__name__}: {exc}"


def run_experiment_matrix(cells, workers=None):
    """Run every (key, ScenarioConfig) cell; failures are recorded, not raised.

    Returns {key: TrajectoryLog or None} and {key: error message}.
    """
    cells = list(cells)
    workers = min(thread_cap(workers), len(cells)) if cells else 1
    results, errors = {}, {}
    if workers <= 1:
        outs = [_run_cell(c) for c in cells]
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            outs = list(ex.map(_run_cell, cells))
    for key, lg, err in outs:
        results[key] = lg
        if err is not None:
            errors[key] = err
        elif lg.diverged:
            errors[key] = "diverged"
    return results, errors
