"""Control-affine plant models, the planar quadrotor and fixed-step integration.

All plants have the form ``xdot = f(x) + B(x) (u + d(x))`` with the
uncertainty ``d`` entering through the input channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Deriv = Callable[[np.ndarray], np.ndarray]


class DivergedError(RuntimeError):
    """Raised when an integrated state becomes non-finite."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} (last valid t={t:.6g} s)")
        self.t = t


@dataclass
class SystemModel:
    state_dim: int
    input_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_matrix: Callable[[np.ndarray], np.ndarray]
    x_box: np.ndarray
    u_box: np.ndarray
    lipschitz_B: float = 0.0
    lipschitz_d: float = 0.0
    bound_d: float = 0.0
    drift_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    state_names: tuple = ()
    constant_B: bool = False
    drift_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.x_box = np.asarray(self.x_box, dtype=float).reshape(self.state_dim, 2)
        self.u_box = np.asarray(self.u_box, dtype=float).reshape(self.input_dim, 2)
        if np.any(self.u_box[:, 0] > self.u_box[:, 1]):
            raise ValueError("input box lower bound exceeds upper bound")
        if np.any(self.x_box[:, 0] > self.x_box[:, 1]):
            raise ValueError("state box lower bound exceeds upper bound")
        if min(self.lipschitz_B, self.lipschitz_d, self.bound_d) < 0:
            raise ValueError("Lipschitz and bound constants must be nonnegative")

    def in_state_box(self, x, tol=0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.x_box[:, 0] - tol) and np.all(x <= self.x_box[:, 1] + tol))

    def in_input_box(self, u, tol=0.0) -> bool:
        u = np.asarray(u)
        return bool(np.all(u >= self.u_box[:, 0] - tol) and np.all(u <= self.u_box[:, 1] + tol))

    def saturate(self, u):
        return np.clip(u, self.u_box[:, 0], self.u_box[:, 1])

    def jacobian(self, x, h=1e-6):
        """df/dx, analytic when available, otherwise central differences."""
        if self.drift_jacobian is not None:
            return self.drift_jacobian(x)
        x = np.asarray(x, dtype=float)
        J = np.empty((self.state_dim, self.state_dim))
        for k in range(self.state_dim):
            step = h * max(1.0, abs(x[k]))
            e = np.zeros_like(x)
            e[k] = step
            J[:, k] = (self.drift(x + e) - self.drift(x - e)) / (2 * step)
        return J

    def input_matrix_pinv(self, x):
        if self.constant_B:
            cached = getattr(self, "_pinv", None)
            if cached is None:
                cached = self._pinv = np.linalg.pinv(self.input_matrix(x))
            return cached
        return np.linalg.pinv(self.input_matrix(x))

    def min_singular_B(self, samples) -> float:
        """Smallest singular value of B over sampled states (full column rank check)."""
        return min(np.linalg.svd(self.input_matrix(x), compute_uv=False)[-1] for x in samples)

    def sample_states(self, count, rng):
        lo, hi = self.x_box[:, 0], self.x_box[:, 1]
        return lo + (hi - lo) * rng.random((count, self.state_dim))

    def sample_inputs(self, count, rng):
        lo, hi = self.u_box[:, 0], self.u_box[:, 1]
        return lo + (hi - lo) * rng.random((count, self.input_dim))


@dataclass
class DisturbanceField:
    eval: Callable[[np.ndarray], np.ndarray]
    declared_lipschitz: float
    declared_bound: float
    name: str = "custom"

    def __call__(self, x):
        return self.eval(x)

    def sampled_constants(self, model: SystemModel, n_pairs=10_000, seed=0):
        """Largest sampled Lipschitz ratio and norm over random pairs in the state box."""
        rng = np.random.default_rng(seed)
        xs = model.sample_states(n_pairs, rng)
        ys = model.sample_states(n_pairs, rng)
        dx = np.array([self.eval(x) for x in xs])
        dy = np.array([self.eval(y) for y in ys])
        ratio = np.linalg.norm(dx - dy, axis=1) / np.linalg.norm(xs - ys, axis=1)
        bound = max(np.linalg.norm(dx, axis=1).max(), np.linalg.norm(dy, axis=1).max())
        return float(ratio.max()), float(bound)


def zero_disturbance(input_dim: int) -> DisturbanceField:
    z = np.zeros(input_dim)
    return DisturbanceField(lambda x: z.copy(), 0.0, 0.0, name="zero")


def constant_disturbance(value) -> DisturbanceField:
    value = np.asarray(value, dtype=float)
    return DisturbanceField(lambda x: value.copy(), 0.0, float(np.linalg.norm(value)),
                            name="constant")


def true_derivative(model: SystemModel, dist, x, u):
    """f(x) + B(x)(u + d(x))."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.state_dim,) or u.shape != (model.input_dim,):
        raise ValueError(f"dimension mismatch: x{x.shape}, u{u.shape}")
    return model.drift(x) + model.input_matrix(x) @ (u + dist(x))


def learned_derivative(model: SystemModel, dhat, x, u):
    """F_l(x, u) = f(x) + B(x) dhat(x) + B(x) u; ``dhat=None`` means no learning."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.state_dim,) or u.shape != (model.input_dim,):
        raise ValueError(f"dimension mismatch: x{x.shape}, u{u.shape}")
    B = model.input_matrix(x)
    if dhat is None:
        return model.drift(x) + B @ u
    dh = np.asarray(dhat(x), dtype=float)
    if dh.shape != (model.input_dim,):
        raise ValueError(f"learned model output has shape {dh.shape}, expected ({model.input_dim},)")
    return model.drift(x) + B @ dh + B @ u


def rk4_step(deriv: Deriv, x, dt):
    k1 = deriv(x)
    k2 = deriv(x + 0.5 * dt * k1)
    k3 = deriv(x + 0.5 * dt * k2)
    k4 = deriv(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_rk4(deriv: Deriv, x0, t_span, dt):
    """Classical fixed-step RK4 of an autonomous ODE.

    Returns ``(t, X)`` with the state at every step boundary, ``X[0] = x0``.
    ``t_span`` must be an integer multiple of ``dt`` up to rounding.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_span < dt:
        raise ValueError("t_span must be at least dt")
    steps = int(round(t_span / dt))
    x = np.array(x0, dtype=float)
    X = np.empty((steps + 1, x.size))
    X[0] = x
    for k in range(steps):
        x = rk4_step(deriv, x, dt)
        if not np.all(np.isfinite(x)):
            raise DivergedError("non-finite state", k * dt)
        X[k + 1] = x
    return np.arange(steps + 1) * dt, X


# ---------------------------------------------------------------- quadrotor

QUAD_STATE_NAMES = ("p_x", "p_z", "phi", "v_x", "v_z", "phi_dot")


@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 0.486
    inertia: float = 0.00383
    arm: float = 0.25
    gravity: float = 9.81

    def __post_init__(self):
        for name in ("mass", "inertia", "arm", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"quadrotor {name} must be strictly positive")

    @property
    def hover_thrust(self) -> float:
        """Per-rotor thrust holding the vehicle level and still."""
        return 0.5 * self.mass * self.gravity


@dataclass
class QuadrotorBoxes:
    position: tuple = (0.0, 15.0)
    angle: tuple = (-np.pi / 3, np.pi / 3)
    v_x: tuple = (-2.0, 2.0)
    v_z: tuple = (-1.0, 1.0)
    angle_rate: tuple = (-np.pi / 3, np.pi / 3)
    thrust_factor: float = 1.5  # upper thrust bound = factor * m * g per rotor
    extra: dict = field(default_factory=dict)


def quadrotor_model(params: QuadrotorParams = QuadrotorParams(), boxes: QuadrotorBoxes = None,
                    lipschitz_d=4.0, bound_d=3.54) -> SystemModel:
    """Planar quadrotor, state (p_x, p_z, phi, v_x, v_z, phi_dot), input = rotor thrusts."""
    boxes = boxes or QuadrotorBoxes()
    g = params.gravity
    B = np.zeros((6, 2))
    B[4, :] = 1.0 / params.mass
    B[5, 0] = params.arm / params.inertia
    B[5, 1] = -params.arm / params.inertia
    B.setflags(write=False)

    def drift(x):
        _, _, phi, vx, vz, w = x
        s, c = np.sin(phi), np.cos(phi)
        return np.array([vx * c - vz * s,
                         vx * s + vz * c,
                         w,
                         vz * w - g * s,
                         -vx * w - g * c,
                         0.0])

    def drift_batch(X):
        X = np.asarray(X, dtype=float)
        phi, vx, vz, w = X[..., 2], X[..., 3], X[..., 4], X[..., 5]
        s, c = np.sin(phi), np.cos(phi)
        return np.stack([vx * c - vz * s, vx * s + vz * c, w, vz * w - g * s,
                         -vx * w - g * c, np.zeros_like(phi)], axis=-1)

    def jac(x):
        _, _, phi, vx, vz, w = x
        s, c = np.sin(phi), np.cos(phi)
        J = np.zeros((6, 6))
        J[0, 2:5] = (-vx * s - vz * c, c, -s)
        J[1, 2:5] = (vx * c - vz * s, s, c)
        J[2, 5] = 1.0
        J[3, 2] = -g * c
        J[3, 4] = w
        J[3, 5] = vz
        J[4, 2] = g * s
        J[4, 3] = -w
        J[4, 5] = -vx
        return J

    umax = boxes.thrust_factor * params.mass * g
    x_box = [boxes.position, boxes.position, boxes.angle, boxes.v_x, boxes.v_z, boxes.angle_rate]
    model = SystemModel(6, 2, drift, lambda x: B, x_box, [(0.0, umax), (0.0, umax)],
                        lipschitz_B=0.0, lipschitz_d=lipschitz_d, bound_d=bound_d,
                        drift_jacobian=jac, state_names=QUAD_STATE_NAMES, constant_B=True,
                        drift_batch=drift_batch)
    model.params = params
    return model


def benchmark_disturbance(lipschitz=4.0, bound=3.54) -> DisturbanceField:
    """Position-weighted drag-like push on both rotors.

    d(x) = rho(p) * 0.5 * (v_x^2 + v_z^2) * [1, 1] with rho = 1 / (p_x^2 + p_z^2 + 1).
    """
    def d(x):
        rho = 1.0 / (x[0] * x[0] + x[1] * x[1] + 1.0)
        val = rho * 0.5 * (x[3] * x[3] + x[4] * x[4])
        return np.array([val, val])

    return DisturbanceField(d, lipschitz, bound, name="benchmark")


def hover_state(p_x, p_z):
    return np.array([p_x, p_z, 0.0, 0.0, 0.0, 0.0])
