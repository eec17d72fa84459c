"""Piecewise-constant disturbance estimation and its error bounds.

A state predictor runs alongside the plant; every ``T`` seconds the lumped
disturbance estimate is reset from the prediction error and held constant
until the next sample.  The matched estimate is its projection through the
pseudoinverse of B.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .dynamics import SystemModel, rk4_step


class SamplingContractError(ValueError):
    """A sample update was requested off the sampling grid."""


@dataclass(frozen=True)
class EstimatorState:
    x_hat: np.ndarray
    sigma_hat: np.ndarray
    d_check: np.ndarray
    a: float
    T: float
    last_sample_index: int = 0
    x_tilde: np.ndarray = None

    @property
    def update_gain(self) -> float:
        return -self.a / math.expm1(self.a * self.T)


def init_estimator(model: SystemModel, x0, a=10.0, T=0.002) -> EstimatorState:
    """Predictor started on the measured state with a zero estimate."""
    if a <= 0 or T <= 0:
        raise ValueError("estimator gain and sampling period must be positive")
    x0 = np.array(x0, dtype=float)
    return EstimatorState(x_hat=x0.copy(), sigma_hat=np.zeros(model.state_dim),
                          d_check=np.zeros(model.input_dim), a=float(a), T=float(T),
                          last_sample_index=0, x_tilde=np.zeros(model.state_dim))


def predictor_step(est: EstimatorState, model: SystemModel, x, u, dt, stages=None) -> EstimatorState:
    """One RK4 step of the predictor with u and sigma_hat frozen over the step.

    ``stages`` are the plant's four RK4 stage states when predictor and plant
    are integrated together; without them the measured x is frozen too.
    """
    u = np.asarray(u, dtype=float)
    a = est.a
    if stages is None:
        x = np.asarray(x, dtype=float)
        base = model.drift(x) + model.input_matrix(x) @ u + est.sigma_hat + a * x
        x_hat = rk4_step(lambda xh: base - a * xh, est.x_hat, dt)
    else:
        def rhs(xs, xh):
            return model.drift(xs) + model.input_matrix(xs) @ u + est.sigma_hat - a * (xh - xs)
        xh = est.x_hat
        k1 = rhs(stages[0], xh)
        k2 = rhs(stages[1], xh + 0.5 * dt * k1)
        k3 = rhs(stages[2], xh + 0.5 * dt * k2)
        k4 = rhs(stages[3], xh + dt * k3)
        x_hat = xh + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_hat)):
        raise FloatingPointError("predictor state became non-finite")
    return replace(est, x_hat=x_hat)


def sample_update(est: EstimatorState, model: SystemModel, x, t, rel_tol=1e-9) -> EstimatorState:
    """sigma_hat <- -a/(e^{aT}-1) * (x_hat - x) at a sample instant t = i*T."""
    i = int(round(t / est.T))
    if abs(t - i * est.T) > rel_tol * max(1.0, abs(t)) + 1e-12:
        raise SamplingContractError(f"t={t!r} is not a multiple of T={est.T!r}")
    x = np.asarray(x, dtype=float)
    x_tilde = est.x_hat - x
    sigma = est.update_gain * x_tilde
    d_check = model.input_matrix_pinv(x) @ sigma
    return replace(est, sigma_hat=sigma, d_check=d_check, last_sample_index=i, x_tilde=x_tilde)


# ------------------------------------------------------------------ bounds

@dataclass(frozen=True)
class EebParams:
    phi: float
    maxB: float
    maxBdagger: float
    L_B: float
    L_d: float
    b_d: float
    n: int
    a: float
    T: float

    def __post_init__(self):
        for name in ("phi", "maxB", "maxBdagger", "L_B", "L_d", "b_d", "a", "T"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.phi < self.b_d * self.maxB * (1 - 1e-12):
            raise ValueError("phi must be at least b_d * max|B|")


def alpha(p: EebParams, T=None) -> float:
    """Bound on |sigma_hat - sigma| after the first sample, as a function of T."""
    T = p.T if T is None else T
    rn = math.sqrt(p.n)
    return (2 * rn * p.phi * T * (p.L_d * p.maxB + p.L_B * p.b_d)
            + (1 - math.exp(-p.a * T)) * rn * p.b_d * p.maxB)


def compute_eeb(p: EebParams, t, T=None) -> float:
    """Theoretical estimation error bound delta(t, T)."""
    T = p.T if T is None else T
    if t < T:
        return p.b_d
    return alpha(p, T) * p.maxBdagger


def max_sampling_period(p: EebParams, target: float) -> float:
    """Largest T for which the post-sample bound equals ``target``."""
    fn = lambda T: alpha(p, T) * p.maxBdagger - target
    hi = 1.0
    while fn(hi) < 0:
        hi *= 10
    return brentq(fn, 0.0, hi, xtol=1e-18, rtol=1e-12)


def input_matrix_norms(model: SystemModel, samples=None):
    """(max |B(x)|, max |B^+(x)|) over sampled states (exact for constant B)."""
    if model.constant_B or samples is None:
        xs = [model.x_box.mean(axis=1)] if samples is None else samples[:1]
    else:
        xs = samples
    nb = max(np.linalg.norm(model.input_matrix(x), 2) for x in xs)
    nbd = max(np.linalg.norm(model.input_matrix_pinv(x), 2) for x in xs)
    return float(nb), float(nbd)


def compute_phi(model: SystemModel, b_d, counts, chunk=200_000):
    """Grid maximum of |f(x) + B(x)u| plus b_d max|B(x)|.

    ``counts`` gives points per axis for the n state coordinates followed by
    the m input coordinates; a count of 1 places the axis at the box centre.
    The grid maximum is a lower estimate of the true supremum; finer grids
    that contain coarser ones can only increase it.
    """
    counts = list(counts)
    n, m = model.state_dim, model.input_dim
    if len(counts) != n + m or min(counts) < 1:
        raise ValueError("need one positive count per state and input axis")
    boxes = np.vstack([model.x_box, model.u_box])
    axes = [np.linspace(lo, hi, c) if c > 1 else np.array([(lo + hi) / 2])
            for (lo, hi), c in zip(boxes, counts)]
    x_axes, u_axes = axes[:n], axes[n:]
    U = np.array(list(itertools.product(*u_axes)))
    if len(U) == 0:
        raise ValueError("empty grid")
    best = 0.0
    maxB = 0.0
    batch = getattr(model, "drift_batch", None)
    states = itertools.product(*x_axes)
    while True:
        block = np.array(list(itertools.islice(states, chunk)))
        if block.size == 0:
            break
        if batch is not None and model.constant_B:
            F = batch(block)
            B = model.input_matrix(block[0])
            BU = U @ B.T
            # |f + Bu| maximised over the input grid for each state
            for start in range(0, len(F), 4096):
                vals = np.linalg.norm(F[start:start + 4096, None, :] + BU[None], axis=2)
                best = max(best, float(vals.max()))
            maxB = max(maxB, float(np.linalg.norm(B, 2)))
        else:
            for x in block:
                B = model.input_matrix(x)
                vals = np.linalg.norm(model.drift(x)[None] + U @ B.T, axis=1)
                best = max(best, float(vals.max()))
                maxB = max(maxB, float(np.linalg.norm(B, 2)))
    return best + b_d * maxB


def eeb_params_for(model: SystemModel, phi, a, T) -> EebParams:
    nb, nbd = input_matrix_norms(model)
    return EebParams(phi=phi, maxB=nb, maxBdagger=nbd, L_B=model.lipschitz_B, L_d=model.lipschitz_d,
                     b_d=model.bound_d, n=model.state_dim, a=a, T=T)


def constant_disturbance_error_bound(sigma_norm, a, T):
    """Post-sample lumped estimation error for a constant true disturbance.

    With sigma constant, sigma_hat = e^{-aT} sigma exactly, so the error is
    (1 - e^{-aT}) |sigma|.
    """
    return -math.expm1(-a * T) * sigma_norm


def empirical_eeb_calibration(scenarios, T=None, a=None, safety=2.0, t_min=None):
    """Largest observed |d_check - d(x)| over t >= T, inflated by ``safety``.

    ``scenarios`` is an iterable of ``ScenarioConfig``; each is simulated with
    its own controller settings (``T``/``a`` override the estimator fields when
    given).  A diverging scenario raises.
    """
    from .sim import run_scenario  # deferred: sim imports this module

    worst = 0.0
    for cfg in scenarios:
        if T is not None or a is not None:
            cfg = cfg.with_estimator(a=a, T=T)
        log = run_scenario(cfg)
        if log.diverged:
            raise RuntimeError(f"calibration scenario {cfg.name!r} diverged")
        err = log.estimation_error()
        t0 = cfg.T if t_min is None else t_min
        mask = log.t >= t0 - 1e-12
        worst = max(worst, float(err[mask].max()))
    return safety * worst
