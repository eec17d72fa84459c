"""Obstacle-avoiding trajectory generation for the planar quadrotor.

Positions are a clamped degree-7 B-spline in normalised time.  Five repeated
control points at each end give zero velocity, acceleration, jerk and snap, so the
plan starts and ends at hover.  Attitude, body velocities and rotor thrusts
follow from differential flatness; the learned disturbance is then removed
from the thrusts so that the plan is exact for the learned dynamics.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import BSpline
from scipy.optimize import minimize

from .dynamics import SystemModel, learned_derivative

log = logging.getLogger(__name__)

PLAN_FORMAT = "rccm-plan/1"
DEGREE = 7
CLAMP = 5  # repeated control points per end


class PlanningError(RuntimeError):
    pass


@dataclass
class TaskSpec:
    name: str
    start: tuple
    goal: tuple
    obstacles: list = field(default_factory=list)  # [(cx, cz, radius), ...]
    actual_start: tuple = None

    def __post_init__(self):
        self.start = tuple(float(v) for v in self.start)
        self.goal = tuple(float(v) for v in self.goal)
        self.actual_start = self.start if self.actual_start is None else tuple(float(v) for v in self.actual_start)
        self.obstacles = [tuple(float(v) for v in ob) for ob in self.obstacles]

    def validate(self, model: SystemModel):
        box = model.x_box[:2]
        for name, p in (("start", self.start), ("goal", self.goal), ("actual_start", self.actual_start)):
            if not np.all((np.array(p) >= box[:, 0]) & (np.array(p) <= box[:, 1])):
                raise ValueError(f"task {self.name}: {name} {p} outside the position box")


@dataclass
class PlanParams:
    """Compact description of a plan: arrival time and spline control points."""
    arrival_time: float
    control_points: np.ndarray  # (n_ctrl, 2)

    def to_dict(self):
        return {"arrival_time": self.arrival_time, "control_points": self.control_points.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["arrival_time"]), np.array(d["control_points"], dtype=float))


@dataclass
class PlannedTrajectory:
    t_grid: np.ndarray
    x_star: np.ndarray
    u_star: np.ndarray
    xdot_star: np.ndarray
    arrival_time: float
    cost: float
    params: PlanParams = None
    task: str = ""

    def sample(self, t):
        """Linear interpolation of (x*, u*, xdot*); held constant past the last sample."""
        tg = self.t_grid
        if t <= tg[0]:
            return self.x_star[0], self.u_star[0], self.xdot_star[0]
        if t >= tg[-1]:
            return self.x_star[-1], self.u_star[-1], self.xdot_star[-1]
        h = tg[1] - tg[0]
        k = min(int((t - tg[0]) / h), len(tg) - 2)
        w = (t - tg[k]) / (tg[k + 1] - tg[k])
        lerp = lambda A: (1 - w) * A[k] + w * A[k + 1]
        return lerp(self.x_star), lerp(self.u_star), lerp(self.xdot_star)


@dataclass
class PlannerConfig:
    n_free: int = 5
    n_samples: int = 161
    clearance: float = 0.15  # obstacle margin (m)
    box_fraction: float = 0.03  # interior margin on attitude and velocity bounds
    input_margin: float = 0.5  # N, interior margin on planned thrusts (and on the disturbance set if given)
    t_bounds: tuple = (1.0, 40.0)
    time_weight: float = 5.0
    max_iter: int = 300
    grid_dt: float = 0.001
    hold: float = 0.0  # hover time appended after arrival
    box_override: dict = field(default_factory=dict)  # state index -> (lo, hi) for planning only
    lateral_offsets: tuple = (0.0, 2.5, -2.5)


def _knots(n_ctrl):
    inner = np.linspace(0.0, 1.0, n_ctrl - DEGREE + 1)[1:-1]
    return np.concatenate([np.zeros(DEGREE + 1), inner, np.ones(DEGREE + 1)])


def basis_matrices(n_ctrl, tau, orders=5):
    """[B_0, ..., B_{orders-1}] with B_k[s, j] = d^k/dtau^k of basis j at tau[s]."""
    kn = _knots(n_ctrl)
    out = [np.zeros((len(tau), n_ctrl)) for _ in range(orders)]
    for j in range(n_ctrl):
        c = np.zeros(n_ctrl)
        c[j] = 1.0
        spl = BSpline(kn, c, DEGREE, extrapolate=False)
        for k in range(orders):
            v = spl(tau, nu=k)
            out[k][:, j] = np.nan_to_num(v)
    # make the right end exact (BSpline is right-open)
    end = tau >= 1.0
    if np.any(end):
        for k in range(orders):
            spl_vals = np.array([BSpline(kn, np.eye(n_ctrl)[j], DEGREE)(1.0, nu=k) for j in range(n_ctrl)])
            out[k][end] = spl_vals
    return out


def spline_derivatives(Bm, C, T):
    """Position and its first four time derivatives.

    Control points are taken relative to the first one: basis derivatives sum
    to zero, so constant stretches then give exactly zero derivatives.
    """
    D = C - C[0]
    out = [C[0] + Bm[0] @ D]
    out += [(B @ D) / T ** k for k, B in enumerate(Bm) if k > 0]
    return out


def flat_states(model: SystemModel, P, V, A, Jk, S):
    """States and nominal thrusts from position derivatives (rows are samples)."""
    prm = model.params
    g, m, Jm, arm = prm.gravity, prm.mass, prm.inertia, prm.arm
    qx, qz = A[:, 0], A[:, 1] + g
    dqx, dqz = Jk[:, 0], Jk[:, 1]
    ddqx, ddqz = S[:, 0], S[:, 1]
    phi = np.arctan2(-qx, qz)
    D = qx * qx + qz * qz
    N = -qz * dqx + qx * dqz
    dphi = N / D
    dN = -qz * ddqx + qx * ddqz
    dD = 2 * (qx * dqx + qz * dqz)
    ddphi = (dN * D - N * dD) / (D * D)
    c, s = np.cos(phi), np.sin(phi)
    vx = c * V[:, 0] + s * V[:, 1]
    vz = -s * V[:, 0] + c * V[:, 1]
    F = m * np.sqrt(D)
    dF = Jm * ddphi / arm
    X = np.stack([P[:, 0], P[:, 1], phi, vx, vz, dphi], axis=1)
    U = np.stack([(F + dF) / 2, (F - dF) / 2], axis=1)
    return X, U


def _apply_dhat(dhat, X):
    if dhat is None:
        return np.zeros((len(X), 2))
    return np.asarray(dhat(X), dtype=float).reshape(len(X), -1)


class _Problem:
    def __init__(self, model, task, dhat, cfg, dist_box):
        self.model, self.task, self.dhat, self.cfg = model, task, dhat, cfg
        self.n_ctrl = 2 * CLAMP + cfg.n_free
        self.tau = np.linspace(0.0, 1.0, cfg.n_samples)
        self.Bm = basis_matrices(self.n_ctrl, self.tau)
        self.w = np.full(cfg.n_samples, 1.0 / (cfg.n_samples - 1))
        self.w[[0, -1]] *= 0.5
        m = model.input_dim
        self.dist_box = np.zeros((m, 2)) if dist_box is None else np.asarray(dist_box, float)
        self.xbox = model.x_box.copy()
        for k, (lo, hi) in cfg.box_override.items():
            self.xbox[int(k)] = (lo, hi)
        width = self.xbox[:, 1] - self.xbox[:, 0]
        self.xmargin = cfg.box_fraction * width
        self.xmargin[:2] = 0.0  # starts may sit on the position bounds

    def unpack(self, z):
        T = z[0]
        C = np.empty((self.n_ctrl, 2))
        C[:CLAMP] = self.task.start
        C[-CLAMP:] = self.task.goal
        C[CLAMP:-CLAMP] = z[1:].reshape(-1, 2)
        return T, C

    def pack(self, T, C):
        return np.concatenate([[T], C[CLAMP:-CLAMP].ravel()])

    def evaluate(self, z):
        T, C = self.unpack(z)
        P, V, A, Jk, S = spline_derivatives(self.Bm, C, T)
        X, Ubar = flat_states(self.model, P, V, A, Jk, S)
        U = Ubar - _apply_dhat(self.dhat, X)
        return T, X, Ubar, U

    def objective(self, z):
        T, X, Ubar, U = self.evaluate(z)
        return T * float(self.w @ np.sum(U * U, axis=1)) + self.cfg.time_weight * T

    def constraints(self, z):
        T, X, Ubar, U = self.evaluate(z)
        parts = []
        for cx, cz, r in self.task.obstacles:
            parts.append(np.hypot(X[:, 0] - cx, X[:, 1] - cz) - r - self.cfg.clearance)
        lo, hi = self.xbox[:, 0] + self.xmargin, self.xbox[:, 1] - self.xmargin
        parts.append((X - lo).ravel())
        parts.append((hi - X).ravel())
        ul, uh = self.model.u_box[:, 0], self.model.u_box[:, 1]
        V = U + _apply_dhat(self.dhat, X)
        m = self.cfg.input_margin
        # true-system input V - d must stay admissible for every d in the box
        parts.append((V - self.dist_box[:, 1] - ul - m).ravel())
        parts.append((uh - (V - self.dist_box[:, 0]) - m).ravel())
        parts.append((U - ul - m).ravel())
        parts.append((uh - U - m).ravel())
        return np.concatenate(parts)


def _initial_guesses(task: TaskSpec, cfg: PlannerConfig, xbox):
    s, g = np.array(task.start), np.array(task.goal)
    dist = np.linalg.norm(g - s)
    # level cruise: world velocity equals body velocity, so the box caps it
    vmax = np.minimum(-xbox[3:5, 0], xbox[3:5, 1])
    T0 = float(np.clip(2.0 + 2.2 * np.max(np.abs(g - s) / vmax), *cfg.t_bounds))
    d = (g - s) / dist if dist > 0 else np.array([1.0, 0.0])
    perp = np.array([-d[1], d[0]])
    out = []
    frac = np.linspace(0, 1, cfg.n_free + 2)[1:-1]
    for off in cfg.lateral_offsets:
        bump = np.sin(np.pi * frac)[:, None] * off * perp
        free = s + frac[:, None] * (g - s) + bump
        C = np.vstack([np.tile(s, (CLAMP, 1)), free, np.tile(g, (CLAMP, 1))])
        out.append((T0, C))
    return out


def plan_flat(task: TaskSpec, model: SystemModel, dhat=None, cfg: PlannerConfig = None,
              dist_box=None, init: PlanParams = None) -> PlannedTrajectory:
    """Optimise arrival time and free control points; return the plan on a fine grid.

    ``dist_box`` is the componentwise disturbance range [[lo, hi], ...] used for
    the input admissibility constraint; ``init`` adds a warm start to the
    default straight and side-stepping initial guesses.
    """
    cfg = cfg or PlannerConfig()
    task.validate(model)
    prob = _Problem(model, task, dhat, cfg, dist_box)
    guesses = _initial_guesses(task, cfg, prob.xbox)
    if init is not None:
        if len(init.control_points) != prob.n_ctrl:
            raise ValueError("warm start has a different number of control points")
        guesses.insert(0, (init.arrival_time, init.control_points))
    bounds = [cfg.t_bounds] + [tuple(model.x_box[k % 2]) for k in range(2 * cfg.n_free)]
    best = None
    for T0, C0 in guesses:
        z0 = prob.pack(T0, C0)
        res = minimize(prob.objective, z0, method="SLSQP", bounds=bounds,
                       constraints=[{"type": "ineq", "fun": prob.constraints}],
                       options={"maxiter": cfg.max_iter, "ftol": 1e-9})
        viol = -min(0.0, float(prob.constraints(res.x).min()))
        cost = prob.objective(res.x)
        log.info("task %s guess T0=%.2f: cost %.4f, violation %.2e, %s", task.name, T0, cost, viol, res.message)
        if viol <= 1e-6 and (best is None or cost < best[0]):
            best = (cost, res.x)
    if best is None:
        raise PlanningError(f"no clearance-feasible plan found for task {task.name!r}")
    T, C = prob.unpack(best[1])
    return materialize(PlanParams(T, C), task, model, dhat, cfg.grid_dt, cfg.hold, cfg.time_weight)


def materialize(params: PlanParams, task: TaskSpec, model: SystemModel, dhat=None, grid_dt=0.001,
                hold=0.0, time_weight=5.0) -> PlannedTrajectory:
    """Sample a plan on a uniform grid, with optional hover after arrival."""
    T = params.arrival_time
    n_ctrl = len(params.control_points)
    # arrival lands on a grid node so no interval straddles the end of the spline
    n_arrive = max(1, int(round(T / grid_dt)))
    h = T / n_arrive
    steps = n_arrive + int(math.ceil(hold / h - 1e-9))
    t = np.arange(steps + 1) * h
    tau = np.clip(t / T, 0.0, 1.0)
    Bm = basis_matrices(n_ctrl, tau)
    P, V, A, Jk, S = spline_derivatives(Bm, params.control_points, T)
    after = t > T
    for arr in (V, A, Jk, S):
        arr[after] = 0.0
    X, Ubar = flat_states(model, P, V, A, Jk, S)
    U = Ubar - _apply_dhat(dhat, X)
    Xd = np.array([learned_derivative(model, dhat, x, u) for x, u in zip(X, U)])
    traj = PlannedTrajectory(t, X, U, Xd, T, 0.0, params, task.name)
    traj.cost = evaluate_cost(traj.t_grid[t <= T + 1e-12], traj.u_star[t <= T + 1e-12], T, time_weight)
    return traj


def evaluate_cost(t, u, horizon=None, time_weight=5.0) -> float:
    """Trapezoidal integral of |u|^2 plus ``time_weight`` times the horizon."""
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float).reshape(len(t), -1)
    horizon = t[-1] - t[0] if horizon is None else horizon
    return float(trapezoid(np.sum(u * u, axis=1), t)) + time_weight * horizon


def dynamics_residual(traj: PlannedTrajectory, model: SystemModel, dhat=None) -> float:
    """Largest |(x_{k+1} - x_k)/h - F_l(midpoint)| over the grid."""
    X, U, t = traj.x_star, traj.u_star, traj.t_grid
    h = np.diff(t)[:, None]
    fd = np.diff(X, axis=0) / h
    Xm = 0.5 * (X[1:] + X[:-1])
    Um = 0.5 * (U[1:] + U[:-1])
    F = np.array([learned_derivative(model, dhat, x, u) for x, u in zip(Xm, Um)])
    return float(np.max(np.abs(fd - F)))


def min_clearance(traj: PlannedTrajectory, task: TaskSpec) -> float:
    if not task.obstacles:
        return np.inf
    P = traj.x_star[:, :2]
    return float(min((np.hypot(P[:, 0] - cx, P[:, 1] - cz) - r).min() for cx, cz, r in task.obstacles))


# ---------------------------------------------------------------- file I/O

STATE_COLS = ("p_x", "p_z", "phi", "v_x", "v_z", "phi_dot")


def save_plan_csv(traj: PlannedTrajectory, path):
    n, m = traj.x_star.shape[1], traj.u_star.shape[1]
    cols = (["t"] + [f"x_{k}" for k in range(n)] + [f"u_{k}" for k in range(m)]
            + [f"xdot_{k}" for k in range(n)])
    meta = {"format": PLAN_FORMAT, "task": traj.task, "arrival_time": traj.arrival_time, "cost": traj.cost}
    if traj.params is not None:
        meta["params"] = traj.params.to_dict()
    data = np.column_stack([traj.t_grid, traj.x_star, traj.u_star, traj.xdot_star])
    with open(path, "w") as fh:
        fh.write(f"# {json.dumps(meta)}\n")
        fh.write(",".join(cols) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.17g")


def save_plan_params(traj: PlannedTrajectory, path, **extra):
    """Compact plan file: arrival time and control points, re-sampled on load."""
    data = {"format": PLAN_FORMAT, "task": traj.task, "arrival_time": traj.arrival_time,
            "cost": traj.cost, "params": traj.params.to_dict()}
    data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)


def load_plan_csv(path) -> PlannedTrajectory:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError("missing plan header")
        meta = json.loads(first[2:])
        if meta.get("format") != PLAN_FORMAT:
            raise ValueError(f"unsupported plan format {meta.get('format')!r}")
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    n = sum(c.startswith("x_") for c in header)
    m = sum(c.startswith("u_") for c in header)
    params = PlanParams.from_dict(meta["params"]) if "params" in meta else None
    return PlannedTrajectory(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:1 + n + m], data[:, 1 + n + m:],
                             float(meta["arrival_time"]), float(meta["cost"]), params, meta.get("task", ""))
