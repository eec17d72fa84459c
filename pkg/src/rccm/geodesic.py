"""Minimum-energy curves between two states under a Riemannian metric M = W^{-1}.

Curves are Chebyshev series on s in [0, 1].  The two highest coefficients of
every coordinate are fixed by the endpoint constraints, leaving an
unconstrained problem in the remaining coefficients.  The energy is
integrated with Clenshaw-Curtis quadrature on Chebyshev-Gauss-Lobatto nodes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial import chebyshev as C

from ._kernels import energy_kernel, newton_solve
from .metric import MetricInvalidError, MetricPolynomial, eval_M_and_derivs

log = logging.getLogger(__name__)


@dataclass
class GeodesicSolverConfig:
    basis_order: int = 10
    quadrature_order: int = 16
    max_iters: int = 100
    grad_tol: float = 1e-8
    coincide_tol: float = 1e-12  # endpoints closer than this (relative) are treated as equal

    def __post_init__(self):
        if self.basis_order < 3:
            raise ValueError("basis_order must be at least 3")
        if self.quadrature_order < 2 or self.max_iters < 1 or self.grad_tol <= 0 or self.coincide_tol < 0:
            raise ValueError("invalid geodesic solver tolerances")


@dataclass
class GeodesicCurve:
    basis_order: int
    coeffs: np.ndarray          # (basis_order, n) Chebyshev coefficients per coordinate
    quad_nodes: np.ndarray
    quad_weights: np.ndarray
    energy: float
    gamma_s0: np.ndarray
    gamma_s1: np.ndarray
    x_star: np.ndarray
    x: np.ndarray
    iterations: int = 0
    converged: bool = True
    grad_norm: float = 0.0
    free: Optional[np.ndarray] = field(default=None, repr=False)

    def __call__(self, s):
        """Curve points at parameter values ``s`` (scalar or array) in [0, 1]."""
        s = np.asarray(s, dtype=float)
        return C.chebval(2 * s - 1, self.coeffs).T

    def tangent(self, s):
        s = np.asarray(s, dtype=float)
        return 2 * C.chebval(2 * s - 1, C.chebder(self.coeffs)).T


def clenshaw_curtis(N):
    """Chebyshev-Gauss-Lobatto nodes on [-1, 1] (ascending) and Clenshaw-Curtis weights."""
    theta = np.pi * np.arange(N + 1) / N
    x = -np.cos(theta)
    w = np.zeros(N + 1)
    v = np.ones(N - 1)
    inner = theta[1:-1]
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N * N - 1)
        for k in range(1, N // 2):
            v -= 2 * np.cos(2 * k * inner) / (4 * k * k - 1)
        v -= np.cos(N * inner) / (N * N - 1)
    else:
        w[0] = w[N] = 1.0 / (N * N)
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2 * np.cos(2 * k * inner) / (4 * k * k - 1)
    w[1:-1] = 2 * v / N
    return x, w


def _basis(K, tau):
    """Values and tau-derivatives of T_0..T_{K-1} at tau, shape (len(tau), K)."""
    V = C.chebvander(tau, K - 1)
    D = np.zeros_like(V)
    for j in range(K):
        e = np.zeros(K)
        e[j] = 1.0
        D[:, j] = C.chebval(tau, C.chebder(e))
    return V, D


class GeodesicSolver:
    """Reusable solver with a warm-start workspace.

    Not safe for concurrent use; create one solver per control loop.
    """

    def __init__(self, metric: MetricPolynomial, cfg: GeodesicSolverConfig = None):
        self.metric = metric
        self.cfg = cfg or GeodesicSolverConfig()
        K = self.cfg.basis_order
        n = metric.n
        tau, w = clenshaw_curtis(self.cfg.quadrature_order)
        self.nodes = 0.5 * (tau + 1.0)
        self.weights = 0.5 * w
        T, dT = _basis(K, tau)
        dT = 2.0 * dT  # d/ds
        # endpoint rows: gamma(0) uses tau=-1, gamma(1) uses tau=+1
        A = np.vstack([(-1.0) ** np.arange(K), np.ones(K)])
        Ae_inv = np.linalg.inv(A[:, K - 2:])
        P = np.vstack([np.eye(K - 2), -Ae_inv @ A[:, :K - 2]])
        Q = np.vstack([np.zeros((K - 2, 2)), Ae_inv])
        self.P, self.Q = P, Q
        self.TP, self.TQ = T @ P, T @ Q
        self.DP, self.DQ = dT @ P, dT @ Q
        ends = np.array([-1.0, 1.0])
        _, dTe = _basis(K, ends)
        self.dTe = 2.0 * dTe
        self.n = n
        self.K = K
        self.dep = list(metric.depends_on)
        self._dep_arr = np.array(self.dep, dtype=np.int64)
        self._exps = np.ascontiguousarray(metric.exponents, dtype=np.int64)
        self._coeffs_arr = np.ascontiguousarray(metric.coeffs)
        self._warm = None
        self._prev = None  # solution before _warm, for extrapolation
        self.last_stats = {}

    # ------------------------------------------------------------------ core
    def _coeffs(self, Z, Xe):
        return self.P @ Z + self.Q @ Xe

    def _eval(self, Z, Xe, order=1):
        """Energy, gradient w.r.t. free coefficients and (order 2) Hessians (exact, Gauss-Newton)."""
        ok, E, grad, H, Hgn = energy_kernel(np.ascontiguousarray(Z), Xe, self.TP, self.TQ, self.DP,
                                            self.DQ, self.weights, self._exps, self._coeffs_arr,
                                            self._dep_arr, order >= 2)
        if not ok:
            raise MetricInvalidError(Xe[1], "(at a quadrature node of the candidate curve)")
        if order < 2:
            return E, grad, None
        return E, grad, (0.5 * (H + H.T), Hgn)

    def _eval_reference(self, Z, Xe, order=1):
        """Vectorised numpy version of ``_eval``; kept as the cross-check for the kernel."""
        G = self.TP @ Z + self.TQ @ Xe
        V = self.DP @ Z + self.DQ @ Xe
        wq = self.weights
        if order >= 2:
            W, dW, d2W = self.metric.W_and_partials_batch(G, second=True)
        else:
            W, dW = self.metric.W_and_partials_batch(G)
        try:
            L = np.linalg.cholesky(W)
        except np.linalg.LinAlgError:
            raise MetricInvalidError(G[np.argmin(np.linalg.eigvalsh(W)[:, 0])]) from None
        Y = np.linalg.solve(W, V[..., None])[..., 0]          # M v per node
        E = float(np.sum(wq * np.einsum("qi,qi->q", V, Y)))
        WaY = np.einsum("qaij,qj->qai", dW, Y)                 # (q, r, n)
        gX = np.zeros_like(G)
        gX[:, self.dep] = -wq[:, None] * np.einsum("qai,qi->qa", WaY, Y)
        gV = 2.0 * wq[:, None] * Y
        grad = self.TP.T @ gX + self.DP.T @ gV
        if order < 2:
            return E, grad, None
        n, r = self.n, len(self.dep)
        Minv = np.linalg.inv(L)
        M = np.einsum("qki,qkj->qij", Minv, Minv)
        Hvv = 2.0 * wq[:, None, None] * M
        MWaY = np.einsum("qij,qaj->qai", M, WaY)              # (q, r, n)
        Hvx = np.zeros((len(wq), n, n))
        Hvx[:, :, self.dep] = -2.0 * wq[:, None, None] * np.swapaxes(MWaY, 1, 2)
        Hxx_dep = 2.0 * np.einsum("qai,qbi->qab", WaY, MWaY) - np.einsum("qi,qabij,qj->qab", Y, d2W, Y)
        Hxx = np.zeros((len(wq), n, n))
        for a, ka in enumerate(self.dep):
            for b, kb in enumerate(self.dep):
                Hxx[:, ka, kb] = wq * Hxx_dep[:, a, b]
        DP, TP = self.DP, self.TP
        H = (np.einsum("qj,qk,qil->jikl", DP, DP, Hvv)
             + np.einsum("qj,qk,qil->jikl", DP, TP, Hvx)
             + np.einsum("qj,qk,qli->jikl", TP, DP, Hvx)
             + np.einsum("qj,qk,qil->jikl", TP, TP, Hxx))
        m = (self.K - 2) * n
        H = H.reshape(m, m)
        Hgn = np.einsum("qj,qk,qil->jikl", DP, DP, Hvv).reshape(m, m)
        return E, grad, (0.5 * (H + H.T), Hgn)

    def energy(self, Z, x_star, x):
        Xe = np.vstack([x_star, x])
        return self._eval(Z, Xe, order=1)[0]

    def gradient(self, Z, x_star, x):
        Xe = np.vstack([x_star, x])
        return self._eval(Z, Xe, order=1)[1]

    def straight_free(self, x_star, x):
        """Free coefficients of the straight segment from x_star to x."""
        c = np.zeros((self.K, self.n))
        c[0] = 0.5 * (np.asarray(x_star) + np.asarray(x))
        c[1] = 0.5 * (np.asarray(x) - np.asarray(x_star))
        return c[:self.K - 2].copy()

    # ----------------------------------------------------------------- solve
    def solve(self, x_star, x, warm_start=None):
        """Minimise the discretised energy between ``x_star`` (s=0) and ``x`` (s=1).

        ``warm_start`` may be a previous ``GeodesicCurve`` or ``True`` to reuse
        the solver's last solution; its interior coefficients are kept while
        the endpoints move.  ``"extrapolate"`` starts from the linear
        extrapolation of the last two solutions, which suits calls at a fixed
        time step along a trajectory.  Non-convergence returns the best iterate flagged
        ``converged=False``.
        """
        x_star = np.asarray(x_star, dtype=float)
        x = np.asarray(x, dtype=float)
        Xe = np.vstack([x_star, x])
        Z_fallback = None
        if warm_start == "extrapolate" and self._prev is not None:
            Z = 2.0 * self._warm - self._prev
            Z_fallback = self._warm.copy()
        elif warm_start is True or warm_start == "extrapolate":
            Z = None if self._warm is None else self._warm.copy()
        elif isinstance(warm_start, GeodesicCurve) and warm_start.free is not None:
            Z = warm_start.free.copy()
        else:
            Z = None
        coincident = np.max(np.abs(x - x_star)) <= self.cfg.coincide_tol * max(1.0, np.max(np.abs(x_star)))
        if Z is None or coincident:
            Z = self.straight_free(x_star, x)
        if coincident:
            # below rounding the energy and its first variation are zero
            c = self._coeffs(Z, Xe)
            self._remember(Z)
            self.last_stats = {"iterations": 0, "converged": True}
            zero = np.zeros_like(x)
            return GeodesicCurve(self.K, c, self.nodes.copy(), self.weights.copy(), 0.0, zero, zero.copy(),
                                 x_star, x, 0, True, 0.0, Z.copy())
        cfg = self.cfg
        status, Z, E, g, it, converged = newton_solve(
            np.ascontiguousarray(Z), Xe, self.TP, self.TQ, self.DP, self.DQ, self.weights, self._exps,
            self._coeffs_arr, self._dep_arr, cfg.max_iters, cfg.grad_tol)
        if status < 0 and Z_fallback is not None:
            status, Z, E, g, it, converged = newton_solve(
                Z_fallback, Xe, self.TP, self.TQ, self.DP, self.DQ, self.weights, self._exps,
                self._coeffs_arr, self._dep_arr, cfg.max_iters, cfg.grad_tol)
        if status < 0:
            raise MetricInvalidError(x, "(on the initial curve)")
        if not converged:
            log.warning("geodesic solve did not converge: |g|=%.3e E=%.3e after %d iterations",
                        float(np.max(np.abs(g))), E, it)
        self._remember(Z)
        c = self._coeffs(Z, Xe)
        gs = self.dTe @ c
        self.last_stats = {"iterations": it, "converged": converged}
        return GeodesicCurve(self.K, c, self.nodes.copy(), self.weights.copy(), E, gs[0], gs[1],
                             x_star, x, it, converged, float(np.max(np.abs(g))), Z.copy())

    def _remember(self, Z):
        self._prev = self._warm
        self._warm = Z.copy()

    def reset(self):
        self._warm = None
        self._prev = None


def solve_geodesic(metric, x_star, x, cfg: GeodesicSolverConfig = None, warm_start=None):
    return GeodesicSolver(metric, cfg).solve(x_star, x, warm_start=warm_start)


def energy_lower_bound(metric: MetricPolynomial, x_star, x):
    """alpha_1 |x - x_star|^2, a floor for the Riemannian energy."""
    d = np.asarray(x, dtype=float) - np.asarray(x_star, dtype=float)
    return metric.alpha1 * float(d @ d)


def first_variation_terms(curve: GeodesicCurve, metric: MetricPolynomial, x_star, x, atol=1e-9):
    """Row vectors gamma_s(1)^T M(x) and gamma_s(0)^T M(x_star).

    With these, dE/dt = 2 (first) @ xdot - 2 (second) @ xdot_star.
    """
    x_star = np.asarray(x_star, dtype=float)
    x = np.asarray(x, dtype=float)
    scale = 1.0 + max(np.max(np.abs(x)), np.max(np.abs(x_star)))
    if (np.max(np.abs(curve(0.0) - x_star)) > atol * scale
            or np.max(np.abs(curve(1.0) - x)) > atol * scale):
        raise ValueError("geodesic endpoints do not match (x_star, x)")
    M1, _ = eval_M_and_derivs(metric, x)
    M0, _ = eval_M_and_derivs(metric, x_star)
    return curve.gamma_s1 @ M1, curve.gamma_s0 @ M0
