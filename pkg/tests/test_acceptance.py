"""End-to-end acceptance criteria, one test per criterion.

The run matrix (3 tasks x 4 learning tiers x 2 controllers) is simulated once
per session with the shipped plans, models and metric.
"""
import time

import numpy as np
import pytest

from oracles import constrained_lsq, dp_relaxation_energy
from rccm.controller import RreTerms, min_norm_control
from rccm.estimator import compute_phi, eeb_params_for, max_sampling_period
from rccm.experiment import (TIERS, load_benchmark, matrix_cells, plan_prechecks, post_transient_deviation,
                             scenario_for)
from rccm.geodesic import GeodesicSolver
from rccm.learner import SnMlp, init_net, loss_and_grads, sampled_lipschitz
from rccm.metric import MetricPolynomial, box_grid, verify_dual_ccm
from rccm.report import closed_loop_cost
from rccm.sim import data_path, energy_decay_slope, run_experiment_matrix, run_scenario

LAM = 0.8


@pytest.fixture(scope="session")
def bench():
    return load_benchmark()


@pytest.fixture(scope="session")
def matrix(bench):
    cells = matrix_cells(bench)
    results, errors = run_experiment_matrix(cells, workers=1)
    return dict(cells), results, errors


def record(prop, num, detail):
    prop("criterion", num)
    prop("detail", detail)


def test_c01_exponential_energy_decay(bench, record_property):
    cfg = scenario_for(bench, "task1", "none", horizon=10.0)
    t0 = time.perf_counter()
    lg = run_scenario(cfg)
    wall = time.perf_counter() - t0
    slope = energy_decay_slope(lg)
    record(record_property, 1, f"log-E slope {slope:.3f} (need <= {-2 * LAM * 0.95:.3f}), "
                               f"10 s run took {wall:.1f} s (need < 30)")
    assert not lg.diverged
    assert slope <= -2 * LAM * 0.95
    assert wall < 30.0


def test_c02_eeb_dominance(matrix, record_property):
    _, results, errors = matrix
    worst_ratio, worst_late, bad = 0.0, 0.0, 0
    for lg in results.values():
        if lg is None:
            continue
        err = lg.estimation_error()
        bad += int(np.sum(err > lg.delta_theory))
        worst_ratio = max(worst_ratio, float(np.max(err / lg.delta_theory)))
        worst_late = max(worst_late, float(err[lg.t >= 0.1].max()))
    record(record_property, 2, f"{bad} rows above delta(t,T), worst |err|/delta {worst_ratio:.3g}, "
                               f"max error after 0.1 s {worst_late:.4f} (need <= 0.1), {len(errors)} failed cells")
    assert not errors
    assert bad == 0
    assert worst_late <= 0.1


def test_c03_eeb_threshold(quad, record_property):
    phi = compute_phi(quad, quad.bound_d, [9] * 8)
    T = max_sampling_period(eeb_params_for(quad, 783.96, 10.0, 0.002), 0.1)
    record(record_property, 3, f"phi {phi:.2f} vs 783.96 ({phi / 783.96 - 1:+.2%}), "
                               f"T {T:.4g} s vs 2.04e-07 ({T / 2.04e-7 - 1:+.2%})")
    assert phi == pytest.approx(783.96, rel=0.02)
    assert T == pytest.approx(2.04e-7, rel=0.05)


def steady_error(lg, t_from=1.0):
    err = lg.estimation_error()
    return float(err[lg.t >= t_from].max())


def test_c04_sampling_period_scaling(bench, record_property):
    errs = {}
    for T in (0.004, 0.002, 0.001):
        cfg = scenario_for(bench, "task1", "none", horizon=10.0, T=T, mode="exploratory")
        errs[T] = steady_error(run_scenario(cfg))
    r1, r2 = errs[0.002] / errs[0.004], errs[0.001] / errs[0.002]
    record(record_property, 4, "steady-state errors " + ", ".join(f"T={T}: {e:.3e}" for T, e in errs.items())
           + f"; ratios {r1:.3f}, {r2:.3f} (need in [0.35, 0.65])")
    assert 0.35 <= r1 <= 0.65
    assert 0.35 <= r2 <= 0.65


def test_c05_min_norm_matches_oracle(record_property):
    rng = np.random.default_rng(5)
    worst, worst_eq = 0.0, 0.0
    for _ in range(1000):
        phi0 = rng.normal() * 10 ** rng.uniform(-2, 2)
        phi1 = rng.normal(size=2) * 10 ** rng.uniform(-1, 1)
        u_star = rng.uniform(0, 6, 2)
        dec = min_norm_control(RreTerms(phi0=phi0, phi1=phi1, E=1.0, lam=LAM), u_star)
        ref = constrained_lsq(phi0, phi1, u_star)
        worst = max(worst, float(np.max(np.abs(dec.u - ref)) / max(1.0, np.max(np.abs(ref)))))
        if dec.constraint_active:
            worst_eq = max(worst_eq, abs(phi0 + phi1 @ (dec.u - u_star)))
    record(record_property, 5, f"max deviation from oracle {worst:.2e} (need <= 1e-8), "
                               f"active-branch residual {worst_eq:.2e} (need <= 1e-10)")
    assert worst <= 1e-8
    assert worst_eq <= 1e-10


def test_c06_geodesic_oracles(quad, metric, record_property):
    rng = np.random.default_rng(6)
    A = rng.normal(size=(6, 6))
    flat = MetricPolynomial.constant(A @ A.T + 0.5 * np.eye(6), LAM)
    M0 = np.linalg.inv(flat.coeffs[0])
    solver = GeodesicSolver(flat)
    worst_const = 0.0
    for _ in range(500):
        a, b = quad.sample_states(2, rng)
        d = b - a
        worst_const = max(worst_const, abs(solver.solve(a, b).energy - d @ M0 @ d) / max(1.0, d @ M0 @ d))
    solver = GeodesicSolver(metric)
    w = quad.x_box[:, 1] - quad.x_box[:, 0]
    worst_dp = -np.inf
    for scale in (0.1, 0.25):
        for _ in range(2):
            a = quad.sample_states(1, rng)[0]
            b = np.clip(a + scale * w * rng.uniform(-1, 1, 6), quad.x_box[:, 0], quad.x_box[:, 1])
            worst_dp = max(worst_dp, solver.solve(a, b).energy - dp_relaxation_energy(metric, a, b, 200))
    # interior pair: the perturbed curve must stay where the metric is certified
    a = quad.x_box[:, 0] + w * rng.uniform(0.3, 0.7, 6)
    b = a + 0.1 * w * rng.uniform(-1, 1, 6)
    Z = solver.straight_free(a, b) + 0.01 * rng.normal(size=(solver.K - 2, 6))
    g = solver.gradient(Z, a, b)
    fd = np.zeros_like(Z)
    h = 1e-6
    for idx in np.ndindex(*Z.shape):
        Zp, Zm = Z.copy(), Z.copy()
        Zp[idx] += h
        Zm[idx] -= h
        fd[idx] = (solver.energy(Zp, a, b) - solver.energy(Zm, a, b)) / (2 * h)
    grad_err = float(np.max(np.abs(g - fd)) / np.max(np.abs(g)))
    record(record_property, 6, f"constant-metric error {worst_const:.2e} (need <= 1e-8), "
                               f"energy minus relaxation {worst_dp:+.2e} (need <= 1e-4), "
                               f"gradient rel. error {grad_err:.2e} (need <= 1e-5)")
    assert worst_const <= 1e-8
    assert worst_dp <= 1e-4
    assert grad_err <= 1e-5


def test_c07_metric_validity(quad, metric, record_property):
    rep = verify_dual_ccm(metric, quad, box_grid(quad, [2, 3, 4, 5], 15))
    record(record_property, 7, f"15^4 grid: worst margin {rep.worst_contraction_margin:.3e}, "
                               f"Killing residual {rep.worst_killing_residual:.1e}, min eig W {rep.min_eig_W:.5f}")
    assert rep.points == 15 ** 4
    assert rep.worst_contraction_margin <= 1e-8
    assert rep.worst_killing_residual <= 1e-8
    assert rep.min_eig_W >= 0.01


def test_c08_lipschitz_certificate(quad, record_property):
    lo, hi = quad.x_box[:, 0], quad.x_box[:, 1]
    prods, sampled = [], []
    for tier in TIERS[1:]:
        net = SnMlp.load(data_path(f"models/{tier}.json"))
        prods.append(net.lipschitz_product())
        sampled.append(sampled_lipschitz(net, lo, hi, n_pairs=10_000))
    rng = np.random.default_rng(8)
    net = init_net([4, 8, 6, 2], 4.0, seed=8)
    net.biases = [rng.normal(scale=0.3, size=b.shape) for b in net.biases]
    X, Y = rng.normal(size=(16, 4)), rng.normal(size=(16, 2))
    _, gW, _ = loss_and_grads(net, X, Y)
    worst, h = 0.0, 1e-6
    for k in range(net.n_layers):
        for idx in np.ndindex(*net.weights[k].shape):
            old = net.weights[k][idx]
            net.weights[k][idx] = old + h
            lp = loss_and_grads(net, X, Y)[0]
            net.weights[k][idx] = old - h
            lm = loss_and_grads(net, X, Y)[0]
            net.weights[k][idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(gW[k][idx] - fd) / max(abs(fd), 1e-3))
    record(record_property, 8, f"singular-value products {max(prods):.6f} (need <= 4.000004), "
                               f"sampled {max(sampled):.4f} (need <= 4), backprop rel. error {worst:.1e}")
    assert max(prods) <= 4 * (1 + 1e-6)
    assert max(sampled) <= 4.0
    assert worst < 1e-4


def test_c09_robustness_ordering(bench, matrix, record_property):
    _, results, errors = matrix
    rows, fails = [], []
    for t in bench.tasks:
        for tier in TIERS:
            rd = results.get((t.name, tier, "rd-ccm"))
            cl = results.get((t.name, tier, "ccm-learned"))
            if rd is None or cl is None:
                fails.append(f"{t.name}/{tier} missing")
                continue
            a, b = post_transient_deviation(rd), post_transient_deviation(cl)
            rows.append(f"{t.name}/{tier} {a:.4f}<{b:.4f}")
            if not (a < b and a < 0.05):
                fails.append(f"{t.name}/{tier}: rd-ccm {a:.4f}, ccm-learned {b:.4f}")
    record(record_property, 9, ("failing: " + "; ".join(fails)) if fails else "post-transient deviation "
           + ", ".join(rows))
    assert not fails


def test_c10_cost_ordering(bench, matrix, record_property):
    _, results, _ = matrix
    rows, ok = [], True
    for t in bench.tasks:
        good = results.get((t.name, "good", "rd-ccm"))
        none = results.get((t.name, "none", "rd-ccm"))
        if good is None or none is None:
            ok = False
            rows.append(f"{t.name} missing")
            continue
        jg, jn = closed_loop_cost(good), closed_loop_cost(none)
        ok &= jg < jn
        rows.append(f"{t.name} J_good {jg:.2f} vs J_none {jn:.2f}")
    record(record_property, 10, "; ".join(rows))
    assert ok


def test_c11_containment_and_saturation(bench, matrix, record_property):
    _, results, _ = matrix
    exits = sat = 0
    for (task, tier, ctrl), lg in results.items():
        if ctrl != "rd-ccm" or lg is None:
            continue
        exits += int(np.sum(lg.in_box < 1))
        sat += int(np.sum(lg.saturated > 0))
    checks = plan_prechecks(bench)
    bad_input = [f"{k[0]}/{k[1]}" for k, r in checks.items() if r.input_margin < 0]
    bad_tube = [f"{k[0]}/{k[1]}" for k, r in checks.items() if not r.tube_ok]
    margin = min(r.input_margin for r in checks.values())
    record(record_property, 11, f"rd-ccm runs: {exits} box-exit rows, {sat} saturated rows; plan pre-checks: "
                                f"input margin {margin:.3f} N ({len(bad_input)}/{len(checks)} plans fail), "
                                f"tube check fails on {len(bad_tube)}/{len(checks)} plans")
    assert exits == 0 and sat == 0
    assert not bad_input and not bad_tube


def test_c12_determinism(matrix, record_property):
    cells, results, _ = matrix
    key = ("task3", "good", "rd-ccm")
    again = run_scenario(cells[key])
    same = results[key] is not None and again.equals(results[key])
    record(record_property, 12, f"rerun of {'/'.join(key)} bit-identical: {same}")
    assert same
