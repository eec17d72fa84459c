import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rccm.experiment import load_benchmark, tier_rmse
from rccm.learner import (SnMlp, TrainConfig, TrainingDivergedError, TrainingSet, forward, grid_dataset,
                          init_net, loss_and_grads, make_dataset_tiers, normalize, sampled_lipschitz, train)
from rccm.sim import data_path

FEATURES = (0, 1, 3, 4)


def test_layer_rescaled_to_budget_root():
    rng = np.random.default_rng(0)
    W = []
    for _ in range(5):
        U, _, Vt = np.linalg.svd(rng.normal(size=(4, 4)))
        W.append(U @ np.diag([5.0, 2.0, 1.0, 0.5]) @ Vt)
    net = SnMlp([4] * 6, W, [np.zeros(4)] * 5, 4.0)
    out = normalize(net)
    for Wk in out.weights:
        assert np.linalg.norm(Wk, 2) == pytest.approx(4 ** 0.2, rel=1e-9)
    assert 4 ** 0.2 == pytest.approx(1.3195, abs=1e-4)
    assert out.lipschitz_product() <= 4 * (1 + 1e-6)


def test_normalize_idempotent():
    net = init_net([4, 32, 32, 32, 32, 2], 4.0, seed=3)
    again = normalize(net)
    for a, b in zip(net.weights, again.weights):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_zero_weights_give_zero_output(caplog):
    net = SnMlp([4, 8, 2], [np.zeros((8, 4)), np.zeros((2, 8))], [np.zeros(8), np.zeros(2)], 4.0)
    with caplog.at_level(logging.WARNING):
        out = normalize(net)
    assert "identically zero" in caplog.text
    assert not forward(out, np.random.default_rng(0).normal(size=(10, 4))).any()


def test_single_linear_layer_is_affine():
    W = np.array([[0.3, -0.2], [0.1, 0.4]])
    b = np.array([1.0, -2.0])
    net = normalize(SnMlp([2, 2], [W.copy()], [b.copy()], 1e6))
    scale = 1e6 / np.linalg.norm(W, 2)
    x = np.array([[0.5, -1.5]])
    np.testing.assert_allclose(forward(net, x), x @ (scale * W).T + b, rtol=1e-12)


def test_dimension_mismatch():
    net = init_net([4, 8, 2], 4.0)
    with pytest.raises(ValueError):
        forward(net, np.zeros(3))


def test_featurize_selects_coordinates():
    net = init_net([4, 8, 2], 4.0, features=FEATURES)
    x = np.arange(6.0)
    np.testing.assert_allclose(net(x), forward(net, x[list(FEATURES)]))


def test_backprop_matches_finite_differences():
    rng = np.random.default_rng(5)
    net = init_net([3, 6, 5, 2], 2.0, seed=1)
    net.biases = [rng.normal(scale=0.3, size=b.shape) for b in net.biases]
    X, Y = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
    _, gW, gb = loss_and_grads(net, X, Y)
    h = 1e-6
    worst = 0.0
    for k in range(net.n_layers):
        for params, grads in ((net.weights, gW), (net.biases, gb)):
            for idx in np.ndindex(*params[k].shape):
                old = params[k][idx]
                params[k][idx] = old + h
                lp = loss_and_grads(net, X, Y)[0]
                params[k][idx] = old - h
                lm = loss_and_grads(net, X, Y)[0]
                params[k][idx] = old
                fd = (lp - lm) / (2 * h)
                worst = max(worst, abs(grads[k][idx] - fd) / max(abs(fd), 1e-3))
    assert worst < 1e-4


def test_fit_zero_target():
    rng = np.random.default_rng(2)
    X = rng.uniform(-1, 1, size=(256, 4))
    net = init_net([4, 32, 32, 32, 32, 2], 4.0, seed=0)
    net, curve = train(net, TrainingSet(X, np.zeros((256, 2))), TrainConfig(epochs=1000, lr=1e-2))
    assert curve[-1] < 1e-6
    assert np.max(np.abs(forward(net, rng.uniform(-1, 1, size=(500, 4))))) < 1e-3


def test_fit_lipschitz_linear_target():
    rng = np.random.default_rng(4)
    A = np.array([[0.6, 0.0, -0.3, 0.2], [0.1, 0.5, 0.0, -0.4]])
    A /= np.linalg.norm(A, 2)
    X = rng.uniform(-1, 1, size=(1024, 4))
    net = init_net([4, 32, 32, 2], 4.0, seed=0)
    net, _ = train(net, TrainingSet(X, X @ A.T), TrainConfig(epochs=1000, lr=3e-3, batch=128))
    Xv = rng.uniform(-1, 1, size=(1000, 4))
    rmse = np.sqrt(np.mean(np.sum((forward(net, Xv) - Xv @ A.T) ** 2, axis=1)))
    assert rmse < 5e-3


def test_training_deterministic():
    rng = np.random.default_rng(8)
    data = TrainingSet(rng.normal(size=(100, 4)), rng.normal(size=(100, 2)))
    cfg = TrainConfig(epochs=5)
    n1, c1 = train(init_net([4, 8, 2], 4.0, seed=2), data, cfg)
    n2, c2 = train(init_net([4, 8, 2], 4.0, seed=2), data, cfg)
    np.testing.assert_array_equal(c1, c2)
    for a, b in zip(n1.weights, n2.weights):
        np.testing.assert_array_equal(a, b)


def test_training_errors():
    net = init_net([4, 8, 2], 4.0)
    with pytest.raises(ValueError):
        train(net, TrainingSet(np.zeros((0, 4)), np.zeros((0, 2))))
    with pytest.raises(ValueError):
        TrainingSet(np.full((2, 4), np.nan), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        train(net, TrainingSet(np.zeros((2, 4)), np.zeros((2, 2))), TrainConfig(optimizer="lbfgs"))
    huge = TrainingSet(np.ones((4, 4)), np.full((4, 2), 1e300))
    with pytest.raises(TrainingDivergedError):
        train(net, huge, TrainConfig(epochs=1))


def test_round_trip(tmp_path):
    net = init_net([4, 8, 8, 2], 4.0, seed=9, features=FEATURES)
    net.save(tmp_path / "m.json")
    back = SnMlp.load(tmp_path / "m.json")
    x = np.random.default_rng(0).normal(size=(5, 6))
    np.testing.assert_array_equal(net(x), back(x))
    assert back.features == FEATURES and back.beta == 4.0
    bad = net.to_dict()
    bad["format"] = "other/0"
    with pytest.raises(ValueError):
        SnMlp.from_dict(bad)
    bad = net.to_dict()
    bad["biases"][0] = [0.0]
    with pytest.raises(ValueError):
        SnMlp.from_dict(bad)


@given(st.integers(0, 2 ** 16))
def test_certificate_after_init(seed):
    net = init_net([4, 32, 32, 32, 32, 2], 4.0, seed=seed)
    assert net.lipschitz_product() <= 4 * (1 + 1e-6)


def test_sampled_lipschitz_within_budget():
    net = init_net([4, 32, 32, 32, 32, 2], 4.0, seed=0)
    rng = np.random.default_rng(1)
    net, _ = train(net, TrainingSet(rng.uniform(-1, 1, (200, 4)), rng.normal(size=(200, 2))),
                   TrainConfig(epochs=10, lr=1e-2))
    assert net.lipschitz_product() <= 4 * (1 + 1e-6)
    assert sampled_lipschitz(lambda X: forward(net, X), -np.ones(4), np.ones(4)) <= 4.0


def test_tiers_by_construction(quad, dist):
    class Log:
        def __init__(self, name, k):
            r = np.random.default_rng(k)
            self.name, self.x, self.d = name, r.normal(size=(50, 6)), r.normal(size=(50, 2))
    tiers = make_dataset_tiers([Log("a", 0)], [Log("b", 1)], quad, dist, FEATURES, stride=5, grid_count=3)
    poor, moderate = tiers["poor"], tiers["moderate"]
    np.testing.assert_array_equal(moderate.inputs[:len(poor)], poor.inputs)
    assert len(moderate) == 2 * len(poor) == 20
    assert len(tiers["good"]) == 3 ** 4


def test_grid_dataset_matches_true_field(quad, dist):
    ds = grid_dataset(quad, dist, FEATURES, 3)
    x = quad.x_box.mean(axis=1)
    x[list(FEATURES)] = ds.inputs[7]
    np.testing.assert_allclose(ds.targets[7], dist(x))


@pytest.fixture(scope="module")
def shipped():
    bench = load_benchmark()
    return bench, {t: SnMlp.load(data_path(f"models/{t}.json")) for t in ("poor", "moderate", "good")}


def test_shipped_models_certified(shipped, quad, dist):
    bench, nets = shipped
    lo, hi = quad.x_box[:, 0], quad.x_box[:, 1]
    for net in nets.values():
        assert net.layer_dims == [4, 32, 32, 32, 32, 2]
        assert net.beta == quad.lipschitz_d == 4.0
        assert net.lipschitz_product() <= 4 * (1 + 1e-6)
        assert sampled_lipschitz(net, lo, hi) <= 4.0
        resid = lambda X: np.array([dist(x) for x in X]) - net(X)  # noqa: E731
        assert sampled_lipschitz(resid, lo, hi, n_pairs=2000) <= 2 * quad.lipschitz_d


def test_tier_quality_ordering(shipped, quad, dist):
    bench, nets = shipped
    rm = {t: tier_rmse(net, quad, dist, bench.features) for t, net in nets.items()}
    assert rm["good"] < 0.05 * quad.bound_d
    assert rm["poor"] > rm["good"]
