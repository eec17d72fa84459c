import numpy as np
import pytest
from hypothesis import given, strategies as st

from rccm.dynamics import (DivergedError, QuadrotorParams, constant_disturbance, hover_state, integrate_rk4,
                           learned_derivative, benchmark_disturbance, quadrotor_model, true_derivative,
                           zero_disturbance)


def states(model):
    return st.tuples(*[st.floats(lo, hi) for lo, hi in model.x_box]).map(np.array)


def inputs(model):
    return st.tuples(*[st.floats(lo, hi) for lo, hi in model.u_box]).map(np.array)


QUAD = quadrotor_model()


def test_quadrotor_parameters():
    p = QuadrotorParams()
    assert (p.mass, p.inertia, p.arm) == (0.486, 0.00383, 0.25)
    assert QUAD.lipschitz_B == 0.0
    assert QUAD.lipschitz_d == 4.0 and QUAD.bound_d == 3.54


def test_boxes_and_input_matrix():
    np.testing.assert_allclose(QUAD.x_box[4], [-1.0, 1.0])
    np.testing.assert_allclose(QUAD.u_box, [[0, 1.5 * 0.486 * 9.81]] * 2)
    B = QUAD.input_matrix(None)
    assert np.count_nonzero(B[:4]) == 0
    np.testing.assert_allclose(B[4], [1 / 0.486] * 2)
    np.testing.assert_allclose(B[5], [0.25 / 0.00383, -0.25 / 0.00383])
    np.testing.assert_allclose(QUAD.input_matrix_pinv(None) @ B, np.eye(2), atol=1e-12)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        QuadrotorParams(mass=0.0)


def test_hover_is_equilibrium():
    x = hover_state(3.0, 4.0)
    u = np.full(2, QuadrotorParams().hover_thrust)
    np.testing.assert_allclose(true_derivative(QUAD, zero_disturbance(2), x, u), 0.0, atol=1e-12)


def test_hover_stays_under_rk4():
    u = np.full(2, QuadrotorParams().hover_thrust)
    x0 = hover_state(5.0, 5.0)
    _, X = integrate_rk4(lambda x: true_derivative(QUAD, zero_disturbance(2), x, u), x0, 1.0, 0.01)
    np.testing.assert_allclose(X, np.tile(x0, (len(X), 1)), atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        true_derivative(QUAD, zero_disturbance(2), np.zeros(5), np.zeros(2))
    with pytest.raises(ValueError):
        learned_derivative(QUAD, None, np.zeros(6), np.zeros(3))


@given(states(QUAD), inputs(QUAD))
def test_true_derivative_termwise(x, u):
    d = benchmark_disturbance()
    phi, vx, vz, w = x[2:]
    m, J, l, g = 0.486, 0.00383, 0.25, 9.81
    dd = d(x)
    expect = np.array([
        vx * np.cos(phi) - vz * np.sin(phi),
        vx * np.sin(phi) + vz * np.cos(phi),
        w,
        vz * w - g * np.sin(phi),
        -vx * w - g * np.cos(phi) + (u[0] + dd[0] + u[1] + dd[1]) / m,
        l / J * ((u[0] + dd[0]) - (u[1] + dd[1])),
    ])
    np.testing.assert_allclose(true_derivative(QUAD, d, x, u), expect, rtol=1e-12, atol=1e-9)


@given(states(QUAD), inputs(QUAD), st.floats(-3, 3), st.floats(-3, 3))
def test_matched_structure_identity(x, u, a, b):
    d = benchmark_disturbance()
    dhat = lambda xx: np.array([a, b]) * (1 + xx[3])
    diff = true_derivative(QUAD, d, x, u) - learned_derivative(QUAD, dhat, x, u)
    np.testing.assert_allclose(diff, QUAD.input_matrix(x) @ (d(x) - dhat(x)), atol=1e-9)


@given(states(QUAD), inputs(QUAD))
def test_learned_derivative_special_cases(x, u):
    d = benchmark_disturbance()
    B = QUAD.input_matrix(x)
    np.testing.assert_array_equal(learned_derivative(QUAD, None, x, u), QUAD.drift(x) + B @ u)
    np.testing.assert_allclose(learned_derivative(QUAD, d, x, u), true_derivative(QUAD, d, x, u),
                               rtol=1e-14, atol=1e-12)


def test_rk4_scalar_decay():
    _, X = integrate_rk4(lambda x: -x, [1.0], 1.0, 0.01)
    assert abs(X[-1, 0] - np.exp(-1)) < 1e-9


def test_rk4_order_on_quadrotor():
    d = benchmark_disturbance()
    u = np.array([2.6, 2.2])
    f = lambda x: true_derivative(QUAD, d, x, u)
    x0 = np.array([1.0, 1.0, 0.1, 0.5, -0.2, 0.1])
    ref = integrate_rk4(f, x0, 1.0, 0.01 / 16)[1][-1]
    e1 = np.linalg.norm(integrate_rk4(f, x0, 1.0, 0.02)[1][-1] - ref)
    e2 = np.linalg.norm(integrate_rk4(f, x0, 1.0, 0.01)[1][-1] - ref)
    assert np.log2(e1 / e2) >= 3.9


def test_rk4_divergence_reports_time():
    with pytest.raises(DivergedError) as info:
        integrate_rk4(lambda x: x * x, [1.0], 2.0, 0.1)
    assert 0.5 < info.value.t < 2.0


def test_rk4_deterministic():
    f = lambda x: -np.sin(x)
    a = integrate_rk4(f, [1.0, 2.0], 1.0, 0.001)[1]
    b = integrate_rk4(f, [1.0, 2.0], 1.0, 0.001)[1]
    assert a.tobytes() == b.tobytes()


def test_benchmark_disturbance_values():
    d = benchmark_disturbance()
    np.testing.assert_array_equal(d(np.array([3.0, 4.0, 0.1, 0.0, 0.0, 0.2])), [0.0, 0.0])
    np.testing.assert_allclose(d(np.array([0.0, 0.0, 0.0, 2.0, 1.0, 0.0])), [2.5, 2.5])


def test_benchmark_disturbance_grid_bound():
    d = benchmark_disturbance()
    g = np.linspace(0, 15, 31)
    best = 0.0
    for px in g:
        for pz in g:
            for vx in (-2.0, 2.0):
                for vz in (-1.0, 1.0):
                    best = max(best, np.linalg.norm(d(np.array([px, pz, 0, vx, vz, 0]))))
    assert best <= 3.54


def test_disturbance_sampled_constants():
    lip, bound = benchmark_disturbance().sampled_constants(QUAD, 10_000)
    assert lip <= 4.0 and bound <= 3.54


def test_constant_disturbance():
    d = constant_disturbance([0.3, -0.1])
    np.testing.assert_array_equal(d(np.zeros(6)), [0.3, -0.1])
    assert d.declared_lipschitz == 0.0


def test_input_matrix_full_rank(rng):
    assert QUAD.min_singular_B(QUAD.sample_states(20, rng)) > 0


def test_box_validation():
    from rccm.dynamics import SystemModel
    with pytest.raises(ValueError):
        SystemModel(1, 1, lambda x: x, lambda x: np.ones((1, 1)), [(0, 1)], [(1, 0)])
