"""Compiled inner loops for the geodesic energy.

Small fixed-size linear algebra is written out by hand; these routines are
called tens of thousands of times per closed-loop run.
"""
import numba as nb
import numpy as np


@nb.njit(cache=True)
def _chol(A, L):
    n = A.shape[0]
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / d
        for i in range(j):
            L[i, j] = 0.0
    return True


@nb.njit(cache=True)
def _chol_solve(L, b, out):
    n = L.shape[0]
    for i in range(n):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * out[k]
        out[i] = t / L[i, i]
    for i in range(n - 1, -1, -1):
        t = out[i]
        for k in range(i + 1, n):
            t -= L[k, i] * out[k]
        out[i] = t / L[i, i]


@nb.njit(cache=True)
def energy_kernel(Z, Xe, TP, TQ, DP, DQ, wq, exps, coeffs, dep, want_hess):
    """Discretised energy, its gradient in Z and (optionally) exact and Gauss-Newton Hessians.

    Returns (ok, E, grad, H, Hgn); ok is False when W is not positive definite at a node.
    """
    nq = wq.shape[0]
    K2, n = Z.shape
    r = dep.shape[0]
    nk = exps.shape[0]
    m = K2 * n
    grad = np.zeros((K2, n))
    H = np.zeros((m, m))
    Hgn = np.zeros((m, m))
    G = np.zeros(n)
    V = np.zeros(n)
    W = np.zeros((n, n))
    dW = np.zeros((r, n, n))
    d2W = np.zeros((r, r, n, n))
    L = np.zeros((n, n))
    y = np.zeros(n)
    M = np.zeros((n, n))
    e = np.zeros(n)
    col = np.zeros(n)
    WaY = np.zeros((r, n))
    MWaY = np.zeros((r, n))
    p = np.zeros(r)
    Hvv = np.zeros((n, n))
    Hvx = np.zeros((n, n))
    Hxx = np.zeros((n, n))
    E = 0.0
    for q in range(nq):
        for i in range(n):
            g_ = TQ[q, 0] * Xe[0, i] + TQ[q, 1] * Xe[1, i]
            v_ = DQ[q, 0] * Xe[0, i] + DQ[q, 1] * Xe[1, i]
            for j in range(K2):
                g_ += TP[q, j] * Z[j, i]
                v_ += DP[q, j] * Z[j, i]
            G[i] = g_
            V[i] = v_
        for a in range(r):
            p[a] = G[dep[a]]
        W[:, :] = 0.0
        dW[:, :, :] = 0.0
        if want_hess:
            d2W[:, :, :, :] = 0.0
        for k in range(nk):
            mv = 1.0
            for a in range(r):
                mv *= p[a] ** exps[k, a]
            for i in range(n):
                for j in range(n):
                    W[i, j] += mv * coeffs[k, i, j]
            for a in range(r):
                ea = exps[k, a]
                if ea == 0:
                    continue
                dm = float(ea)
                for b in range(r):
                    if b == a:
                        dm *= p[b] ** (ea - 1)
                    else:
                        dm *= p[b] ** exps[k, b]
                for i in range(n):
                    for j in range(n):
                        dW[a, i, j] += dm * coeffs[k, i, j]
                if want_hess:
                    for b in range(r):
                        eb = exps[k, b] - (1 if b == a else 0)
                        if eb <= 0:
                            continue
                        d2 = float(ea) * float(eb)
                        for c in range(r):
                            ec = exps[k, c]
                            if c == a:
                                ec -= 1
                            if c == b:
                                ec -= 1
                            d2 *= p[c] ** ec
                        for i in range(n):
                            for j in range(n):
                                d2W[a, b, i, j] += d2 * coeffs[k, i, j]
        if not _chol(W, L):
            return False, 0.0, grad, H, Hgn
        _chol_solve(L, V, y)
        w = wq[q]
        vy = 0.0
        for i in range(n):
            vy += V[i] * y[i]
        E += w * vy
        for a in range(r):
            for i in range(n):
                t = 0.0
                for j in range(n):
                    t += dW[a, i, j] * y[j]
                WaY[a, i] = t
        for j in range(K2):
            tpj = TP[q, j]
            dpj = DP[q, j]
            for i in range(n):
                grad[j, i] += dpj * 2.0 * w * y[i]
            for a in range(r):
                t = 0.0
                for i in range(n):
                    t += y[i] * WaY[a, i]
                grad[j, dep[a]] += -tpj * w * t
        if not want_hess:
            continue
        for i in range(n):
            e[:] = 0.0
            e[i] = 1.0
            _chol_solve(L, e, col)
            for j in range(n):
                M[j, i] = col[j]
        for a in range(r):
            for i in range(n):
                t = 0.0
                for j in range(n):
                    t += M[i, j] * WaY[a, j]
                MWaY[a, i] = t
        for i in range(n):
            for j in range(n):
                Hvv[i, j] = 2.0 * w * M[i, j]
                Hvx[i, j] = 0.0
                Hxx[i, j] = 0.0
        for a in range(r):
            for i in range(n):
                Hvx[i, dep[a]] = -2.0 * w * MWaY[a, i]
            for b in range(r):
                t = 0.0
                for i in range(n):
                    t += 2.0 * WaY[a, i] * MWaY[b, i]
                s = 0.0
                for i in range(n):
                    for j in range(n):
                        s += y[i] * d2W[a, b, i, j] * y[j]
                Hxx[dep[a], dep[b]] = w * (t - s)
        # upper block triangle only; Hvx and Hxx are nonzero only in the metric's coordinates
        for j in range(K2):
            for k in range(j, K2):
                dd = DP[q, j] * DP[q, k]
                dt = DP[q, j] * TP[q, k]
                td = TP[q, j] * DP[q, k]
                tt = TP[q, j] * TP[q, k]
                for i in range(n):
                    row = j * n + i
                    for l in range(n):
                        Hgn[row, k * n + l] += dd * Hvv[i, l]
                for a in range(r):
                    da = dep[a]
                    for i in range(n):
                        H[j * n + i, k * n + da] += dt * Hvx[i, da]
                        H[j * n + da, k * n + i] += td * Hvx[i, da]
                    for b in range(r):
                        H[j * n + da, k * n + dep[b]] += tt * Hxx[da, dep[b]]
    if want_hess:
        for j in range(K2):
            for k in range(j + 1, K2):
                for i in range(n):
                    for l in range(n):
                        Hgn[k * n + l, j * n + i] = Hgn[j * n + i, k * n + l]
                        H[k * n + l, j * n + i] = H[j * n + i, k * n + l]
        for i in range(m):
            for j in range(m):
                H[i, j] += Hgn[i, j]
    return True, E, grad, H, Hgn


@nb.njit(cache=True)
def metric_inverse(x, exps, coeffs, dep):
    """M(x) = W(x)^{-1}; returns (ok, M)."""
    n = coeffs.shape[1]
    W = np.zeros((n, n))
    for k in range(exps.shape[0]):
        mv = 1.0
        for a in range(dep.shape[0]):
            mv *= x[dep[a]] ** exps[k, a]
        for i in range(n):
            for j in range(n):
                W[i, j] += mv * coeffs[k, i, j]
    L = np.zeros((n, n))
    M = np.zeros((n, n))
    if not _chol(W, L):
        return False, M
    e = np.zeros(n)
    col = np.zeros(n)
    for i in range(n):
        e[:] = 0.0
        e[i] = 1.0
        _chol_solve(L, e, col)
        for j in range(n):
            M[j, i] = col[j]
    return True, M


@nb.njit(cache=True)
def _max_abs(a):
    m = 0.0
    for v in a.ravel():
        if abs(v) > m:
            m = abs(v)
    return m


@nb.njit(cache=True)
def newton_solve(Z, Xe, TP, TQ, DP, DQ, wq, exps, coeffs, dep, max_iters, grad_tol):
    """Damped Newton on the free coefficients with a Gauss-Newton fallback.

    Returns (status, Z, E, grad, iterations, converged); status is 0 on
    success and -1 if W was not positive definite at the starting curve.
    """
    K2, n = Z.shape
    m = K2 * n
    ok, E, g, H, Hgn = energy_kernel(Z, Xe, TP, TQ, DP, DQ, wq, exps, coeffs, dep, False)
    if not ok:
        return -1, Z, 0.0, g, 0, False
    L = np.zeros((m, m))
    Hs = np.zeros((m, m))
    p = np.zeros(m)
    converged = False
    it = 0
    while it < max_iters:
        gnorm = _max_abs(g)
        if gnorm <= grad_tol * max(E, 1e-4):
            converged = True
            break
        it += 1
        ok, _, _, H, Hgn = energy_kernel(Z, Xe, TP, TQ, DP, DQ, wq, exps, coeffs, dep, True)
        for i in range(m):
            for j in range(m):
                Hs[i, j] = 0.5 * (H[i, j] + H[j, i])
        gf = g.ravel().copy()
        newton = False
        if not _chol(Hs, L):
            if not _chol(Hgn, L):
                for i in range(m):
                    p[i] = -gf[i]
            else:
                _chol_solve(L, gf, p)
                p *= -1.0
        else:
            _chol_solve(L, gf, p)
            p *= -1.0
            newton = True
        P = p.reshape(K2, n)
        slope = 0.0
        for i in range(m):
            slope += p[i] * gf[i]
        if newton and -slope <= 1e-13 * E:
            # predicted decrease is below the rounding level of E
            converged = True
            break
        step = 1.0
        accepted = False
        Zn = Z.copy()
        En = E
        gn = g
        while step > 1e-12:
            for i in range(K2):
                for j in range(n):
                    Zn[i, j] = Z[i, j] + step * P[i, j]
            okn, En, gn, _, _ = energy_kernel(Zn, Xe, TP, TQ, DP, DQ, wq, exps, coeffs, dep, False)
            if not okn:
                step *= 0.5
                continue
            if En <= E + 1e-4 * step * slope or (abs(En - E) <= 1e-12 * max(E, 1.0)
                                                 and _max_abs(gn) < gnorm):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # no further decrease representable in floating point
            converged = gnorm <= 1e3 * grad_tol * max(E, 1e-4)
            return 0, Z, E, g, it, converged
        Z = Zn
        E = En
        g = gn
        if newton and step == 1.0 and -slope <= 1e-10 * E:
            # a full Newton step from within this decrement leaves a rounding-level error
            converged = True
            break
    if not converged:
        converged = _max_abs(g) <= grad_tol * max(E, 1e-4)
    return 0, Z, E, g, it, converged
