import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rccm.dynamics import QuadrotorParams, SystemModel, quadrotor_model, rk4_step
from rccm.estimator import (EebParams, SamplingContractError, alpha, compute_eeb, compute_phi,
                            constant_disturbance_error_bound, eeb_params_for, init_estimator,
                            max_sampling_period, predictor_step, sample_update)

QUAD = quadrotor_model()
HOVER_U = np.full(2, QuadrotorParams().hover_thrust)
PHI_9 = None


def quad_eeb(phi=783.96, a=10.0, T=0.002):
    return eeb_params_for(QUAD, phi, a, T)


def test_gain_value():
    est = init_estimator(QUAD, np.zeros(6), a=10.0, T=0.002)
    assert est.update_gain == pytest.approx(-10 / (math.exp(0.02) - 1), rel=1e-14)
    # the quoted value -494.98 is a rounding of -495.017
    assert est.update_gain == pytest.approx(-494.98, rel=1e-4)


def test_initial_estimate_is_zero():
    est = init_estimator(QUAD, np.ones(6))
    assert not est.sigma_hat.any() and not est.d_check.any()
    np.testing.assert_array_equal(est.x_hat, np.ones(6))


def test_predictor_replicates_plant_without_disturbance():
    x = np.array([3.0, 4.0, 0.0, 0.0, 0.0, 0.0])
    est = init_estimator(QUAD, x)
    for k in range(1, 9):
        est = predictor_step(est, QUAD, x, HOVER_U, 0.0005)
        if k % 4 == 0:
            est = sample_update(est, QUAD, x, k * 0.0005)
    np.testing.assert_allclose(est.x_tilde, 0.0, atol=1e-15)
    np.testing.assert_allclose(est.sigma_hat, 0.0, atol=1e-12)


def test_predictor_tracks_moving_plant_to_discretisation_order():
    x = np.array([3.0, 4.0, 0.1, 0.3, -0.2, 0.05])
    est = init_estimator(QUAD, x)
    f = lambda xx: QUAD.drift(xx) + QUAD.input_matrix(xx) @ HOVER_U
    dt = 0.0005
    for _ in range(4):
        est = predictor_step(est, QUAD, x, HOVER_U, dt)
        x = rk4_step(f, x, dt)
    # zero-order hold of x inside the predictor costs O(dt^2) per step
    assert np.abs(est.x_hat - x).max() < 4 * dt ** 2 * (np.abs(f(x)).max() + 10 * np.abs(x).max())


def test_predictor_sharing_plant_stages_is_exact():
    x = np.array([3.0, 4.0, 0.1, 0.3, -0.2, 0.05])
    est = init_estimator(QUAD, x)
    f = lambda xx: QUAD.drift(xx) + QUAD.input_matrix(xx) @ HOVER_U
    dt = 0.0005
    for k in range(1, 41):
        k1 = f(x)
        x2 = x + 0.5 * dt * k1
        k2 = f(x2)
        x3 = x + 0.5 * dt * k2
        k3 = f(x3)
        x4 = x + dt * k3
        est = predictor_step(est, QUAD, x, HOVER_U, dt, stages=(x, x2, x3, x4))
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + f(x4))
        if k % 4 == 0:
            est = sample_update(est, QUAD, x, k * dt)
    assert not est.x_tilde.any() and not est.d_check.any()


def test_zero_error_gives_zero_estimate():
    x = np.arange(6.0)
    est = init_estimator(QUAD, x)
    est = sample_update(est, QUAD, x, 0.002)
    assert not est.sigma_hat.any()
    assert est.last_sample_index == 1


def test_off_grid_update_rejected():
    est = init_estimator(QUAD, np.zeros(6))
    with pytest.raises(SamplingContractError):
        sample_update(est, QUAD, np.zeros(6), 0.0031)


def test_d_check_uses_pseudoinverse():
    est = init_estimator(QUAD, np.zeros(6))
    x = np.zeros(6)
    est = est.__class__(**{**est.__dict__, "x_hat": np.array([0, 0, 0, 0, 1e-3, 2e-3])})
    est = sample_update(est, QUAD, x, 0.002)
    np.testing.assert_allclose(est.d_check, QUAD.input_matrix_pinv(x) @ est.sigma_hat, rtol=1e-15)


def test_error_dynamics_linear_oracle():
    """Frozen sigma_hat, constant true sigma: x_tilde obeys x_tilde' = -a x_tilde + sigma_hat - sigma."""
    model = SystemModel(2, 1, lambda x: np.zeros(2), lambda x: np.array([[1.0], [0.5]]),
                        [(-10, 10)] * 2, [(-1, 1)])
    sigma = np.array([0.3, 0.15])
    sig_hat = np.array([0.1, -0.2])
    a, dt, steps = 10.0, 0.0005, 200
    x = np.zeros(2)
    est = init_estimator(model, x, a=a, T=0.002)
    est = est.__class__(**{**est.__dict__, "sigma_hat": sig_hat})
    xt = np.zeros(2)
    decay = math.exp(-a * dt)
    for _ in range(steps):
        est = predictor_step(est, model, x, np.zeros(1), dt)
        x = x + sigma * dt
        # exact solution over one step with the plant state held, as the predictor does
        xt = decay * xt + (1 - decay) / a * sig_hat - sigma * dt
    np.testing.assert_allclose(est.x_hat - x, xt, atol=1e-10)
    t = steps * dt
    cont = (sig_hat - sigma) / a * (1 - math.exp(-a * t))
    np.testing.assert_allclose(est.x_hat - x, cont, atol=np.abs(sigma).max() * dt)


def test_constant_disturbance_estimate_after_one_sample():
    model = SystemModel(2, 2, lambda x: np.zeros(2), lambda x: np.eye(2), [(-10, 10)] * 2, [(-1, 1)] * 2)
    d = np.array([0.4, -0.3])
    a, T, dt = 10.0, 0.002, 0.0005
    x = np.zeros(2)
    est = init_estimator(model, x, a, T)
    errs = []
    for k in range(1, 41):
        est = predictor_step(est, model, x, np.zeros(2), dt)
        x = x + d * dt
        if k % 4 == 0:
            est = sample_update(est, model, x, k * dt)
            errs.append(np.linalg.norm(est.d_check - d))
    bound = constant_disturbance_error_bound(np.linalg.norm(d), a, T)
    assert max(errs) <= bound * (1 + 1e-9)
    assert errs[-1] <= bound * (1 + 1e-9)


def test_sigma_hat_piecewise_constant():
    x = np.array([1.0, 1.0, 0.1, 0.5, 0.2, 0.0])
    est = init_estimator(QUAD, x)
    est = sample_update(est, QUAD, x + 1e-4, 0.002)
    s = est.sigma_hat.copy()
    for _ in range(3):
        est = predictor_step(est, QUAD, x, HOVER_U, 0.0005)
        assert est.sigma_hat.tobytes() == s.tobytes()


def test_eeb_branches():
    p = quad_eeb()
    assert compute_eeb(p, 0.0) == 3.54
    assert compute_eeb(p, 0.0019) == 3.54
    assert compute_eeb(p, 0.002) == pytest.approx(alpha(p) * p.maxBdagger)


def test_eeb_threshold_reproduction():
    T = max_sampling_period(quad_eeb(), 0.1)
    assert T == pytest.approx(2.04e-7, rel=0.05)


def test_alpha_monotone_in_T():
    p = quad_eeb()
    for T in 10.0 ** -np.arange(2, 8):
        assert alpha(p, T / 2) < alpha(p, T)
    assert compute_eeb(p, 1.0, T=1e-12) < 1e-6


def test_eeb_params_validation():
    with pytest.raises(ValueError):
        EebParams(phi=1.0, maxB=92.0, maxBdagger=0.3, L_B=0, L_d=4, b_d=3.54, n=6, a=10, T=0.002)


def test_phi_within_two_percent():
    phi = compute_phi(QUAD, 3.54, [9] * 8)
    assert phi == pytest.approx(783.96, rel=0.02)


def test_phi_degenerate_case():
    B = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    model = SystemModel(3, 2, lambda x: np.zeros(3), lambda x: B, [(-1, 1)] * 3, [(0, 0)] * 2)
    assert compute_phi(model, 1.5, [3, 3, 3, 2, 2]) == pytest.approx(1.5 * np.linalg.norm(B, 2))


def test_phi_refinement_monotone():
    coarse = compute_phi(QUAD, 3.54, [1, 1, 3, 3, 3, 3, 3, 3])
    fine = compute_phi(QUAD, 3.54, [1, 1, 5, 5, 5, 5, 5, 5])
    assert fine >= coarse


def test_phi_rejects_empty():
    with pytest.raises(ValueError):
        compute_phi(QUAD, 3.54, [0] * 8)


@given(st.floats(1e-7, 1e-2), st.floats(1.0, 50.0))
def test_eeb_nonnegative_and_below_initial_branch_for_small_T(T, a):
    p = eeb_params_for(QUAD, 783.96, a, T)
    assert compute_eeb(p, T) >= 0
    assert alpha(p, T / 2) <= alpha(p, T)


@given(st.floats(-1e-2, 1e-2), st.floats(-1e-2, 1e-2))
def test_update_is_linear_in_prediction_error(e1, e2):
    x = np.zeros(6)
    est = init_estimator(QUAD, x)
    xt = np.array([0, 0, 0, 0, e1, e2])
    est = est.__class__(**{**est.__dict__, "x_hat": xt})
    out = sample_update(est, QUAD, x, 0.002)
    np.testing.assert_allclose(out.sigma_hat, est.update_gain * xt, rtol=1e-15)
