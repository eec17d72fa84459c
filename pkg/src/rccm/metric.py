"""Dual contraction metric W(x) stored as a symmetric matrix polynomial.

The metric is an input artifact: a coefficient file produced offline and
checked here by gridding the dual CCM conditions.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg as sla

from ._kernels import metric_inverse
from .dynamics import SystemModel

METRIC_FORMAT = "rccm-metric/1"


class MetricInvalidError(ValueError):
    """W(x) is not positive definite at some state."""

    def __init__(self, x, detail=""):
        super().__init__(f"dual metric not positive definite at x={np.array2string(np.asarray(x), precision=4)} {detail}")
        self.x = np.asarray(x)


class MetricPolynomial:
    """W(x) = sum_k c_k(x_dep) C_k with monomials c_k in the ``depends_on`` coordinates.

    Parameters
    ----------
    state_names : names of all n state coordinates.
    depends_on : names (or indices) of the coordinates W may depend on.
    exponents : (K, r) integer exponents, one row per monomial.
    coeffs : (K, n, n) symmetric coefficient matrices.
    """

    def __init__(self, state_names, depends_on, exponents, coeffs, lam, alpha1, alpha2):
        self.state_names = tuple(state_names)
        self.n = len(self.state_names)
        self.depends_on = tuple(self.state_names.index(d) if isinstance(d, str) else int(d)
                                for d in depends_on)
        r = len(self.depends_on)
        E = np.asarray(exponents, dtype=int)
        self.exponents = E.reshape(-1, r) if r else E.reshape(max(E.shape[:1] or (1,)), 0)
        self.coeffs = np.asarray(coeffs, dtype=float).reshape(-1, self.n, self.n)
        if self.exponents.shape[0] != self.coeffs.shape[0]:
            raise ValueError("one coefficient matrix per monomial is required")
        if not np.allclose(self.coeffs, np.swapaxes(self.coeffs, 1, 2), atol=0.0, rtol=0.0):
            raise ValueError("coefficient matrices must be exactly symmetric")
        if lam <= 0:
            raise ValueError("contraction rate must be positive")
        self.lam = float(lam)
        self.alpha1 = float(alpha1)
        self.alpha2 = float(alpha2)
        self.degree = int(self.exponents.sum(axis=1).max()) if len(self.exponents) else 0
        self._prep_derivatives()

    def _prep_derivatives(self):
        E = self.exponents
        r = E.shape[1]
        self._d1 = []
        for a in range(r):
            mult = E[:, a].astype(float)
            Ea = E.copy()
            Ea[:, a] = np.maximum(Ea[:, a] - 1, 0)
            self._d1.append((mult, Ea))
        self._d2 = {}
        for a, b in itertools.combinations_with_replacement(range(r), 2):
            mult, Ea = self._d1[a]
            mult2 = mult * Ea[:, b]
            Eab = Ea.copy()
            Eab[:, b] = np.maximum(Eab[:, b] - 1, 0)
            self._d2[(a, b)] = (mult2, Eab)

    @property
    def overshoot(self) -> float:
        return float(np.sqrt(self.alpha2 / self.alpha1))

    # -------------------------------------------------------------- evaluation
    @staticmethod
    def _monomials(P, E):
        # P: (q, r) points, E: (K, r) exponents -> (q, K)
        return np.prod(P[:, None, :] ** E[None, :, :], axis=2)

    def dep_coords(self, X):
        X = np.asarray(X, dtype=float)
        return X[..., list(self.depends_on)]

    def W_batch(self, X):
        """W at a batch of states, shape (q, n, n)."""
        P = self.dep_coords(np.atleast_2d(X))
        return np.einsum("qk,kij->qij", self._monomials(P, self.exponents), self.coeffs)

    def W_and_partials_batch(self, X, second=False):
        """W, dW/dx_dep[a] (q, r, n, n) and optionally second partials (q, r, r, n, n)."""
        P = self.dep_coords(np.atleast_2d(X))
        q, r = P.shape
        W = np.einsum("qk,kij->qij", self._monomials(P, self.exponents), self.coeffs)
        dW = np.empty((q, r, self.n, self.n))
        for a, (mult, Ea) in enumerate(self._d1):
            dW[:, a] = np.einsum("qk,kij->qij", self._monomials(P, Ea) * mult, self.coeffs)
        if not second:
            return W, dW
        d2W = np.empty((q, r, r, self.n, self.n))
        for (a, b), (mult, Eab) in self._d2.items():
            val = np.einsum("qk,kij->qij", self._monomials(P, Eab) * mult, self.coeffs)
            d2W[:, a, b] = val
            d2W[:, b, a] = val
        return W, dW, d2W

    def to_dict(self):
        entries = []
        r = len(self.depends_on)
        for i in range(self.n):
            for j in range(i, self.n):
                terms = [[*map(int, e), float(c)] for e, c in zip(self.exponents, self.coeffs[:, i, j])
                         if c != 0.0]
                if terms:
                    entries.append({"i": i, "j": j, "terms": terms})
        return {
            "format": METRIC_FORMAT,
            "state_names": list(self.state_names),
            "depends_on": [self.state_names[k] for k in self.depends_on],
            "lambda": self.lam,
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
            "num_vars": r,
            "entries": entries,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != METRIC_FORMAT:
            raise ValueError(f"unsupported metric format {data.get('format')!r}")
        names = data["state_names"]
        n = len(names)
        r = len(data["depends_on"])
        index = {}
        for entry in data["entries"]:
            for term in entry["terms"]:
                index.setdefault(tuple(int(v) for v in term[:r]), len(index))
        if not index:
            index[(0,) * r] = 0
        coeffs = np.zeros((len(index), n, n))
        for entry in data["entries"]:
            i, j = entry["i"], entry["j"]
            for term in entry["terms"]:
                k = index[tuple(int(v) for v in term[:r])]
                coeffs[k, i, j] = coeffs[k, j, i] = term[r]
        exps = np.array(sorted(index, key=index.get), dtype=int).reshape(-1, r)
        return cls(names, data["depends_on"], exps, coeffs, data["lambda"], data["alpha1"], data["alpha2"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def constant(cls, W0, lam, state_names=None):
        W0 = np.asarray(W0, dtype=float)
        W0 = 0.5 * (W0 + W0.T)
        n = W0.shape[0]
        names = state_names or tuple(f"x{k}" for k in range(n))
        ev = np.linalg.eigvalsh(W0)
        return cls(names, [], np.zeros((1, 0), dtype=int), W0[None], lam, 1.0 / ev[-1], 1.0 / ev[0])


def eval_W(metric: MetricPolynomial, x):
    return metric.W_batch(np.asarray(x, dtype=float)[None])[0]


def eval_M(metric: MetricPolynomial, x):
    """M(x) = W(x)^{-1} through the compiled kernel."""
    arrs = getattr(metric, "_kernel_arrays", None)
    if arrs is None:
        arrs = metric._kernel_arrays = (np.ascontiguousarray(metric.exponents, dtype=np.int64),
                                        np.ascontiguousarray(metric.coeffs, dtype=float),
                                        np.array(metric.depends_on, dtype=np.int64))
    ok, M = metric_inverse(np.asarray(x, dtype=float), *arrs)
    if not ok:
        raise MetricInvalidError(x)
    return M


def eval_M_and_derivs(metric: MetricPolynomial, x):
    """Return ``(M, dW)`` where ``dW[k]`` is dW/dx_k for every state coordinate k.

    Coordinates outside ``depends_on`` get an exact zero matrix.
    """
    x = np.asarray(x, dtype=float)
    W, dWdep = metric.W_and_partials_batch(x[None])
    try:
        c = sla.cho_factor(W[0], lower=True)
    except np.linalg.LinAlgError:
        raise MetricInvalidError(x) from None
    M = sla.cho_solve(c, np.eye(metric.n))
    M = 0.5 * (M + M.T)
    dW = np.zeros((metric.n, metric.n, metric.n))
    for a, k in enumerate(metric.depends_on):
        dW[k] = dWdep[0, a]
    return M, dW


def lie_derivative_W(metric: MetricPolynomial, x, v):
    """Directional derivative of W along vector v at x (the d_v W term)."""
    _, dW = eval_M_and_derivs(metric, x)
    return np.tensordot(v, dW, axes=1)


# ------------------------------------------------------------ verification

@dataclass
class GridSpec:
    """Tensor grid over selected state coordinates; others held at ``base``."""
    axes: list  # (state index, lo, hi, count)
    base: np.ndarray

    def points(self):
        axes_vals = [np.linspace(lo, hi, cnt) for _, lo, hi, cnt in self.axes]
        idx = [a[0] for a in self.axes]
        mesh = np.stack(np.meshgrid(*axes_vals, indexing="ij"), axis=-1).reshape(-1, len(idx))
        X = np.tile(np.asarray(self.base, dtype=float), (mesh.shape[0], 1))
        X[:, idx] = mesh
        return X

    def describe(self):
        return [{"index": int(i), "lo": float(lo), "hi": float(hi), "count": int(c)}
                for i, lo, hi, c in self.axes]


def box_grid(model: SystemModel, indices, count) -> GridSpec:
    base = model.x_box.mean(axis=1)
    return GridSpec([(int(i), float(model.x_box[i, 0]), float(model.x_box[i, 1]), int(count))
                     for i in indices], base)


@dataclass
class CcmVerificationReport:
    grid_spec: list
    worst_contraction_margin: float
    worst_contraction_state: list
    worst_killing_residual: float
    alpha_bounds_found: tuple
    min_eig_W: float
    points: int
    lam: float
    extras: dict = field(default_factory=dict)

    def passed(self, tol=1e-8, w_floor=0.01) -> bool:
        return (self.worst_contraction_margin <= tol and self.worst_killing_residual <= tol
                and self.min_eig_W >= w_floor * (1 - 1e-9))

    def to_dict(self):
        return {
            "grid_spec": self.grid_spec,
            "points": self.points,
            "lambda": self.lam,
            "worst_contraction_margin": self.worst_contraction_margin,
            "worst_contraction_state": self.worst_contraction_state,
            "worst_killing_residual": self.worst_killing_residual,
            "alpha_bounds_found": list(self.alpha_bounds_found),
            "min_eig_W": self.min_eig_W,
        }


def orthogonal_complement(B):
    """Orthonormal basis of the null space of B^T."""
    U, _, _ = np.linalg.svd(B, full_matrices=True)
    return U[:, B.shape[1]:]


def contraction_blocks(metric: MetricPolynomial, model: SystemModel, X, lam=None):
    """B_perp^T(<df/dx W> - d_f W + 2 lam W)B_perp for each row of X."""
    lam = metric.lam if lam is None else lam
    X = np.atleast_2d(X)
    W, dWdep = metric.W_and_partials_batch(X)
    out = []
    Bp_const = orthogonal_complement(model.input_matrix(X[0])) if model.constant_B else None
    for q, x in enumerate(X):
        J = model.jacobian(x)
        f = model.drift(x)
        dfW = np.tensordot(f[list(metric.depends_on)], dWdep[q], axes=1)
        JW = J @ W[q]
        G = JW + JW.T - dfW + 2 * lam * W[q]
        Bp = Bp_const if Bp_const is not None else orthogonal_complement(model.input_matrix(x))
        out.append(Bp.T @ G @ Bp)
    return np.array(out)


def killing_residuals(metric: MetricPolynomial, model: SystemModel, X, h=1e-6):
    """Frobenius norm of <(db_i/dx) W> - d_{b_i} W, maximised over i, for each row of X."""
    X = np.atleast_2d(X)
    W, dWdep = metric.W_and_partials_batch(X)
    dep = list(metric.depends_on)
    res = np.empty(len(X))
    for q, x in enumerate(X):
        B = model.input_matrix(x)
        worst = 0.0
        for i in range(model.input_dim):
            b = B[:, i]
            R = -np.tensordot(b[dep], dWdep[q], axes=1)
            if not model.constant_B:
                db = np.empty((model.state_dim, model.state_dim))
                for k in range(model.state_dim):
                    step = h * max(1.0, abs(x[k]))
                    e = np.zeros_like(x)
                    e[k] = step
                    db[:, k] = (model.input_matrix(x + e)[:, i] - model.input_matrix(x - e)[:, i]) / (2 * step)
                dbW = db @ W[q]
                R = R + dbW + dbW.T
            worst = max(worst, float(np.linalg.norm(R)))
        res[q] = worst
    return res


def verify_dual_ccm(metric: MetricPolynomial, model: SystemModel, grid: GridSpec, lam=None):
    """Grid check of the dual CCM conditions and of the metric eigenvalue bounds."""
    X = grid.points()
    if len(X) == 0:
        raise ValueError("empty verification grid")
    lam = metric.lam if lam is None else lam
    worst, worst_x = -np.inf, None
    kill = 0.0
    eigW_min, eigW_max = np.inf, -np.inf
    for start in range(0, len(X), 4096):
        chunk = X[start:start + 4096]
        blocks = contraction_blocks(metric, model, chunk, lam)
        top = np.linalg.eigvalsh(blocks)[:, -1]
        k = int(np.argmax(top))
        if top[k] > worst:
            worst, worst_x = float(top[k]), chunk[k]
        kill = max(kill, float(killing_residuals(metric, model, chunk).max()))
        ev = np.linalg.eigvalsh(metric.W_batch(chunk))
        if np.any(ev[:, 0] <= 0):
            raise MetricInvalidError(chunk[int(np.argmin(ev[:, 0]))])
        eigW_min = min(eigW_min, float(ev[:, 0].min()))
        eigW_max = max(eigW_max, float(ev[:, -1].max()))
    return CcmVerificationReport(
        grid_spec=grid.describe(),
        worst_contraction_margin=worst,
        worst_contraction_state=[float(v) for v in worst_x],
        worst_killing_residual=kill,
        alpha_bounds_found=(1.0 / eigW_max, 1.0 / eigW_min),
        min_eig_W=eigW_min,
        points=int(len(X)),
        lam=float(lam),
    )


def hover_lqr_metric(model: SystemModel, lam: float, hover_x=None, Q=None, R=None):
    """Constant metric from the Riccati equation of the hover linearization.

    Intended for bring-up only; it is not checked against the dual conditions globally.
    """
    x0 = model.x_box.mean(axis=1) if hover_x is None else np.asarray(hover_x, float)
    A = model.jacobian(x0)
    B = model.input_matrix(x0)
    Q = np.eye(model.state_dim) if Q is None else Q
    R = np.eye(model.input_dim) if R is None else R
    P = sla.solve_continuous_are(A + lam * np.eye(model.state_dim), B, Q, R)
    return MetricPolynomial.constant(np.linalg.inv(P), lam, model.state_names or None)
