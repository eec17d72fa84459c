"""Offline search for a quadrotor dual CCM W(phi, v_x) by gridded SDP.

At fixed (phi, v_x) the contraction block is multi-affine in (v_z, phi_dot),
so its largest eigenvalue over the (v_z, phi_dot) rectangle is attained at a
corner; only the four corners are constrained.  Violations found on a finer
(phi, v_x) grid are added back as cuts.

Requires cvxpy (not a runtime dependency of the package).

    python scripts/synthesize_metric.py src/rccm/data/quadrotor_metric.json
"""
import argparse
import itertools
import time

import cvxpy as cp
import numpy as np

from rccm.dynamics import quadrotor_model
from rccm.metric import MetricPolynomial, box_grid, contraction_blocks, verify_dual_ccm

G = 9.81
N = 6


def monomials(degree):
    return [(i, j) for i in range(degree + 1) for j in range(degree + 1 - i)]


def mono_vals(E, phi, vx):
    v = np.array([phi ** i * vx ** j for i, j in E])
    dp = np.array([i * phi ** (i - 1) * vx ** j if i else 0.0 for i, j in E])
    dv = np.array([j * phi ** i * vx ** (j - 1) if j else 0.0 for i, j in E])
    return v, dp, dv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--degree", type=int, default=4)
    ap.add_argument("--lam", type=float, default=0.8)
    ap.add_argument("--eps", type=float, default=1e-3)
    ap.add_argument("--grid", type=int, default=15)
    ap.add_argument("--check", type=int, default=57)
    ap.add_argument("--wfloor", type=float, default=0.01)
    ap.add_argument("--cuts", type=int, default=40)
    ap.add_argument("--iters", type=int, default=10)
    args = ap.parse_args()

    model = quadrotor_model()
    E = monomials(args.degree)
    K = len(E)
    C = [cp.Variable((N, N), symmetric=True) for _ in range(K)]
    wmax = cp.Variable()
    lam = args.lam
    phib, vxb = model.x_box[2], model.x_box[3]
    corners = list(itertools.product(model.x_box[4], model.x_box[5]))

    def Wexpr(v):
        return sum(float(c) * Ck for c, Ck in zip(v, C) if c != 0.0)

    def cons_at(phi, vx):
        v, dp, dv = mono_vals(E, phi, vx)
        W, Wp, Wv = Wexpr(v), Wexpr(dp), Wexpr(dv)
        out = [W >> args.wfloor * np.eye(N), W << wmax * np.eye(N)]
        for vz, w in corners:
            x = np.array([0, 0, phi, vx, vz, w])
            J = model.jacobian(x)
            G_ = J @ W + W @ J.T - w * Wp - (vz * w - G * np.sin(phi)) * Wv + 2 * lam * W
            blk = G_[0:4, 0:4]
            out.append((blk + blk.T) / 2 << -args.eps * np.eye(4))
        return out

    pts = list(itertools.product(np.linspace(*phib, args.grid), np.linspace(*vxb, args.grid)))
    check = list(itertools.product(np.linspace(*phib, args.check), np.linspace(*vxb, args.check)))
    Xc = np.array([[0, 0, p, v, vz, w] for p, v in check for vz, w in corners], float)
    for it in range(args.iters):
        cons = [c for p in pts for c in cons_at(*p)]
        prob = cp.Problem(cp.Minimize(wmax), cons)
        t0 = time.time()
        prob.solve(solver=cp.CLARABEL)
        print(f"iter {it}: {len(pts)} points, {prob.status}, wmax={wmax.value:.5f}, {time.time() - t0:.1f}s",
              flush=True)
        coeffs = np.array([(Ck.value + Ck.value.T) / 2 for Ck in C])
        metric = MetricPolynomial(model.state_names, ["phi", "v_x"], np.array(E), coeffs, lam, 1.0, 1.0)
        top = np.linalg.eigvalsh(contraction_blocks(metric, model, Xc))[:, -1]
        ev = np.linalg.eigvalsh(metric.W_batch(Xc))
        bad = {(float(x[2]), float(x[3])) for x, t, e in zip(Xc, top, ev)
               if t > 0 or e[0] < args.wfloor}
        print(f"  fine-grid worst margin {top.max():.3e}, min eig W {ev[:, 0].min():.5f}, "
              f"bad points {len(bad)}", flush=True)
        metric.save(args.out)
        if not bad:
            break
        worst = np.argsort(-top)[:4 * args.cuts]
        new = {(float(Xc[k, 2]), float(Xc[k, 3])) for k in worst if top[k] > 0}
        new |= {(float(x[2]), float(x[3])) for x, e in zip(Xc, ev) if e[0] < args.wfloor}
        pts += sorted(new - set(pts))[:args.cuts]
    ev = np.linalg.eigvalsh(metric.W_batch(Xc))
    metric = MetricPolynomial(model.state_names, ["phi", "v_x"], np.array(E), coeffs, lam,
                              1.0 / ev[:, -1].max(), 1.0 / ev[:, 0].min())
    metric.save(args.out)
    rep = verify_dual_ccm(metric, model, box_grid(model, [2, 3, 4, 5], 15))
    print(rep.to_dict())


if __name__ == "__main__":
    main()
