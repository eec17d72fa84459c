"""Pointwise min-norm tracking control from the (robust) Riemannian energy condition.

The energy condition is affine in the input, so the minimum-norm correction to
the planned input is a single projection onto a half-space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import SystemModel
from .geodesic import GeodesicCurve
from .metric import MetricPolynomial, eval_M


class InfeasibleDirectionError(RuntimeError):
    """phi0 > 0 but phi1 vanishes: no input can satisfy the energy condition."""


@dataclass
class RreTerms:
    phi0: float
    phi1: np.ndarray
    E: float
    lam: float
    # raw pieces, kept for slack audits
    drift_term: float = 0.0
    ref_term: float = 0.0
    robust_term: float = 0.0


@dataclass
class ControlDecision:
    u: np.ndarray
    constraint_active: bool
    rre_lhs_margin: float
    geodesic_stats: dict = field(default_factory=dict)
    terms: RreTerms = None


def _check_endpoints(curve: GeodesicCurve, x_star, x, atol=1e-9):
    scale = 1.0 + max(np.max(np.abs(x)), np.max(np.abs(x_star)))
    if (np.max(np.abs(curve.x_star - x_star)) > atol * scale
            or np.max(np.abs(curve.x - x)) > atol * scale):
        raise ValueError("geodesic endpoints do not match (x_star, x)")


def build_rre_terms(curve: GeodesicCurve, metric: MetricPolynomial, model: SystemModel,
                    x, x_star, u_star, xdot_star, d_check, delta, lam=None) -> RreTerms:
    """Offset phi0 and gradient phi1 of the robust energy condition.

    The condition at input k reads phi0 + phi1 (k - u_star) <= 0, where
    phi0 = g1 (f + B(u_star + d_check)) + |g1 B| delta - g0 xdot_star + lam E
    with g1 = gamma_s(1)^T M(x) and g0 = gamma_s(0)^T M(x_star).
    """
    if delta < 0:
        raise ValueError("estimation error bound must be nonnegative")
    x = np.asarray(x, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    _check_endpoints(curve, x_star, x)
    lam = metric.lam if lam is None else lam
    g1 = curve.gamma_s1 @ eval_M(metric, x)
    g0 = curve.gamma_s0 @ eval_M(metric, x_star)
    B = model.input_matrix(x)
    phi1 = g1 @ B
    drift = float(g1 @ (model.drift(x) + B @ (np.asarray(u_star, float) + np.asarray(d_check, float))))
    ref = float(g0 @ np.asarray(xdot_star, float))
    robust = float(np.linalg.norm(phi1) * delta)
    phi0 = drift + robust - ref + lam * curve.energy
    return RreTerms(phi0=phi0, phi1=phi1, E=curve.energy, lam=lam,
                    drift_term=drift, ref_term=ref, robust_term=robust)


def min_norm_control(terms: RreTerms, u_star, tol=1e-12) -> ControlDecision:
    """argmin |k - u_star|^2 subject to phi0 + phi1 (k - u_star) <= 0."""
    u_star = np.asarray(u_star, dtype=float)
    if terms.phi0 <= 0:
        return ControlDecision(u=u_star.copy(), constraint_active=False,
                               rre_lhs_margin=terms.phi0, terms=terms)
    nrm2 = float(terms.phi1 @ terms.phi1)
    if nrm2 <= tol * tol:
        raise InfeasibleDirectionError(
            f"phi0={terms.phi0:.3e} > 0 with |phi1|={np.sqrt(nrm2):.3e}; metric may not be a CCM here")
    u = u_star - (terms.phi0 / nrm2) * terms.phi1
    margin = terms.phi0 + float(terms.phi1 @ (u - u_star))
    return ControlDecision(u=u, constraint_active=True, rre_lhs_margin=margin, terms=terms)


def robust_ccm_control(curve, metric, model, x, x_star, u_star, xdot_star, d_check, delta,
                       lam=None) -> ControlDecision:
    terms = build_rre_terms(curve, metric, model, x, x_star, u_star, xdot_star, d_check, delta, lam)
    dec = min_norm_control(terms, u_star)
    dec.geodesic_stats = {"iterations": curve.iterations, "converged": curve.converged}
    return dec


def nominal_ccm_control(curve, metric, model, dhat, x, x_star, u_star, xdot_star=None,
                        lam=None) -> ControlDecision:
    """Baseline that trusts the learned model: d_check := dhat(x), delta := 0."""
    x = np.asarray(x, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    u_star = np.asarray(u_star, dtype=float)
    dh_x = np.zeros(model.input_dim) if dhat is None else np.asarray(dhat(x), float)
    if xdot_star is None:
        B0 = model.input_matrix(x_star)
        dh0 = np.zeros(model.input_dim) if dhat is None else np.asarray(dhat(x_star), float)
        xdot_star = model.drift(x_star) + B0 @ (u_star + dh0)
    terms = build_rre_terms(curve, metric, model, x, x_star, u_star, xdot_star, dh_x, 0.0, lam)
    dec = min_norm_control(terms, u_star)
    dec.geodesic_stats = {"iterations": curve.iterations, "converged": curve.converged}
    return dec


def true_rre_slack(terms: RreTerms, u, u_star, gamma_B_d_error):
    """Energy-condition LHS + lam E evaluated against the true disturbance.

    ``gamma_B_d_error`` is g1 B (d(x) - d_check); a positive return value means
    the exact decay condition is violated at this instant.
    """
    robust_free = terms.phi0 - terms.robust_term
    return robust_free + float(terms.phi1 @ (np.asarray(u) - np.asarray(u_star))) + gamma_B_d_error


# ------------------------------------------------------------- plan checks

@dataclass
class FeasibilityReport:
    input_margin: float
    worst_input_time: float
    input_violations: np.ndarray
    state_margin: float
    state_violations: np.ndarray
    tube_ok: bool
    tube_margin: float
    tube_violations: np.ndarray
    disturbance_set: str
    ball_input_margin: float

    @property
    def feasible(self) -> bool:
        return self.input_margin >= 0 and self.state_margin >= 0

    @property
    def passed(self) -> bool:
        return self.feasible and self.tube_ok

    def to_dict(self):
        return {"input_margin": self.input_margin, "worst_input_time": self.worst_input_time,
                "n_input_violations": int(len(self.input_violations)),
                "state_margin": self.state_margin,
                "n_state_violations": int(len(self.state_violations)),
                "tube_ok": self.tube_ok, "tube_margin": self.tube_margin,
                "n_tube_violations": int(len(self.tube_violations)),
                "disturbance_set": self.disturbance_set,
                "ball_input_margin": self.ball_input_margin}


def disturbance_range_box(model: SystemModel, dist, count=9):
    """Componentwise hull of d over a grid of the state box.

    Coordinates d does not depend on (checked at a random base point) are
    held at the box centre to keep the grid small.
    """
    rng = np.random.default_rng(0)
    base = model.sample_states(1, rng)[0]
    axes = []
    for k in range(model.state_dim):
        lo, hi = model.x_box[k]
        probe = base.copy()
        vals = []
        for v in (lo, hi, 0.5 * (lo + hi)):
            probe[k] = v
            vals.append(dist(probe))
        if np.ptp(np.array(vals), axis=0).max() == 0.0:
            axes.append(np.array([0.5 * (lo + hi)]))
        else:
            axes.append(np.linspace(lo, hi, count))
    grids = np.meshgrid(*axes, indexing="ij")
    X = np.stack([g.ravel() for g in grids], axis=1)
    D = np.array([dist(x) for x in X])
    return np.stack([D.min(axis=0), D.max(axis=0)], axis=1)


def check_feasible_plan(model: SystemModel, dhat, traj, x0=None, overshoot=None, lam=None,
                        dist_box=None) -> FeasibilityReport:
    """Planned-input admissibility under the disturbance set, state box and tube checks.

    With ``dist_box`` (componentwise [lo, hi] of the disturbance range) the
    input test is u* + dhat(x*) - d in U for every d in that box; without it the
    Euclidean b_d-ball is used through its box cover.  Both margins are reported.
    The tube test needs ``x0``, ``overshoot`` (R) and ``lam``: every state within
    R |x0 - x*(0)| e^{-lam t} of x*(t) must lie in the state box.
    """
    t = np.asarray(traj.t_grid)
    Xs = np.asarray(traj.x_star)
    Us = np.asarray(traj.u_star)
    if dhat is None:
        Dh = np.zeros_like(Us)
    else:
        Dh = np.array([dhat(x) for x in Xs])
    V = Us + Dh
    lo, hi = model.u_box[:, 0], model.u_box[:, 1]
    bd = model.bound_d
    ball = np.minimum(V - lo - bd, hi - bd - V).min(axis=1)
    if dist_box is not None:
        dist_box = np.asarray(dist_box, float)
        # need lo <= V - d <= hi for all d in [dlo, dhi]
        per = np.minimum(V - dist_box[:, 1] - lo, hi - (V - dist_box[:, 0])).min(axis=1)
        kind = "range"
    else:
        per = ball
        kind = "ball"
    k = int(np.argmin(per))
    xlo, xhi = model.x_box[:, 0], model.x_box[:, 1]
    smarg = np.minimum(Xs - xlo, xhi - Xs).min(axis=1)
    tube_ok, tube_margin, tube_bad = True, np.inf, np.array([], dtype=float)
    if x0 is not None and overshoot is not None and lam is not None:
        r = overshoot * np.linalg.norm(np.asarray(x0, float) - Xs[0]) * np.exp(-lam * t)
        tm = (np.minimum(Xs - xlo, xhi - Xs) - r[:, None]).min(axis=1)
        tube_margin = float(tm.min())
        tube_bad = t[tm < 0]
        tube_ok = tube_margin >= 0
    return FeasibilityReport(input_margin=float(per[k]), worst_input_time=float(t[k]),
                             input_violations=t[per < 0], state_margin=float(smarg.min()),
                             state_violations=t[smarg < 0], tube_ok=bool(tube_ok),
                             tube_margin=float(tube_margin), tube_violations=tube_bad,
                             disturbance_set=kind, ball_input_margin=float(ball.min()))
