"""Spectrally normalized ReLU networks for learning the matched uncertainty.

Each layer is rescaled so its top singular value equals beta^(1/(l+1)); the
product over layers, and hence the network's Lipschitz constant in its
inputs, is then at most beta.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MODEL_FORMAT = "rccm-snmlp/1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class SnMlp:
    layer_dims: list
    weights: list
    biases: list
    beta: float
    features: tuple = ()
    power_vectors: list = field(default_factory=list)
    sigma_estimates: list = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_scale(self) -> float:
        return self.beta ** (1.0 / self.n_layers)

    def featurize(self, x):
        x = np.asarray(x, dtype=float)
        if not self.features:
            return x
        return x[..., list(self.features)]

    def __call__(self, x):
        """d_hat for a full state (or a batch of states)."""
        return forward(self, self.featurize(x))

    def copy(self) -> "SnMlp":
        return SnMlp(list(self.layer_dims), [W.copy() for W in self.weights],
                     [b.copy() for b in self.biases], self.beta, tuple(self.features),
                     [v.copy() for v in self.power_vectors], list(self.sigma_estimates))

    def lipschitz_product(self) -> float:
        """Product of exact per-layer spectral norms."""
        return float(np.prod([np.linalg.norm(W, 2) if W.size else 0.0 for W in self.weights]))

    def to_dict(self):
        return {"format": MODEL_FORMAT, "layer_dims": list(self.layer_dims), "beta": self.beta,
                "features": list(self.features),
                "weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {data.get('format')!r}")
        W = [np.array(w, dtype=float).reshape(o, i) for w, i, o in
             zip(data["weights"], data["layer_dims"][:-1], data["layer_dims"][1:])]
        b = [np.array(v, dtype=float) for v in data["biases"]]
        net = cls(list(data["layer_dims"]), W, b, float(data["beta"]), tuple(data.get("features", ())))
        _check_shapes(net)
        return net

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _check_shapes(net: SnMlp):
    dims = net.layer_dims
    if len(net.weights) != len(dims) - 1 or len(net.biases) != len(dims) - 1:
        raise ValueError("layer count does not match layer_dims")
    for W, b, i, o in zip(net.weights, net.biases, dims[:-1], dims[1:]):
        if W.shape != (o, i) or b.shape != (o,):
            raise ValueError(f"layer shape {W.shape}/{b.shape} does not match {i}->{o}")


def init_net(layer_dims, beta, seed=0, features=()) -> SnMlp:
    """He-initialised network, normalised before use."""
    rng = np.random.default_rng(seed)
    W = [rng.normal(0.0, math.sqrt(2.0 / i), size=(o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])]
    b = [np.zeros(o) for o in layer_dims[1:]]
    vecs = [rng.normal(size=o) for o in layer_dims[1:]]
    net = SnMlp(list(layer_dims), W, b, float(beta), tuple(features), [v / np.linalg.norm(v) for v in vecs])
    return normalize(net)


def forward(net: SnMlp, x_feat):
    x = np.asarray(x_feat, dtype=float)
    if x.shape[-1] != net.layer_dims[0]:
        raise ValueError(f"expected {net.layer_dims[0]} features, got {x.shape[-1]}")
    h = x
    last = net.n_layers - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def power_iteration(W, u, steps=3):
    """Top singular value estimate and updated left vector; u has W.shape[0] entries."""
    sigma = 0.0
    for _ in range(steps):
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0, u
        v /= nv
        u = W @ v
        sigma = np.linalg.norm(u)
        if sigma == 0.0:
            return 0.0, u
        u = u / sigma
    return float(sigma), u


def converged_sigma(W, u, rtol=1e-12, max_steps=5000):
    """Power iteration run until successive estimates agree; SVD if it stalls."""
    prev = -1.0
    for _ in range(max_steps):
        s, u = power_iteration(W, u, 1)
        if s == 0.0 or abs(s - prev) <= rtol * s:
            return s, u
        prev = s
    return float(np.linalg.norm(W, 2)), u


def normalize(net: SnMlp, steps=None) -> SnMlp:
    """Rescale every layer to spectral norm beta^(1/(l+1)).

    ``steps=None`` iterates power iteration to convergence (used for the final
    certificate); an integer runs that many warm-started steps (training).
    """
    out = net.copy()
    c = out.layer_scale
    if len(out.power_vectors) != out.n_layers:
        out.power_vectors = [np.ones(W.shape[0]) / math.sqrt(W.shape[0]) for W in out.weights]
    sig = []
    for k, W in enumerate(out.weights):
        u = out.power_vectors[k]
        s, u = converged_sigma(W, u) if steps is None else power_iteration(W, u, steps)
        out.power_vectors[k] = u
        if s == 0.0:
            log.warning("layer %d is identically zero; left unscaled", k)
            sig.append(0.0)
            continue
        out.weights[k] = W * (c / s)
        sig.append(c)
    out.sigma_estimates = sig
    return out


# -------------------------------------------------------------- training

@dataclass
class TrainingSet:
    inputs: np.ndarray
    targets: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in length")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("training data must be finite")

    def __len__(self):
        return len(self.inputs)

    def union(self, other: "TrainingSet") -> "TrainingSet":
        return TrainingSet(np.vstack([self.inputs, other.inputs]), np.vstack([self.targets, other.targets]),
                           self.provenance + other.provenance)


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"
    power_steps: int = 3


def loss_and_grads(net: SnMlp, X, Y):
    """Mean squared error (averaged over samples, summed over outputs) and its gradients."""
    acts = [X]
    pre = []
    h = X
    last = net.n_layers - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < last else z
        acts.append(h)
    r = h - Y
    N = len(X)
    loss = float(np.sum(r * r) / N)
    g = 2.0 * r / N
    gW = [None] * net.n_layers
    gb = [None] * net.n_layers
    for k in range(last, -1, -1):
        gW[k] = g.T @ acts[k]
        gb[k] = g.sum(axis=0)
        if k > 0:
            g = (g @ net.weights[k]) * (pre[k - 1] > 0)
    return loss, gW, gb


def mse(net: SnMlp, X, Y) -> float:
    r = forward(net, X) - Y
    return float(np.sum(r * r) / len(X))


def train(net: SnMlp, data: TrainingSet, cfg: TrainConfig = TrainConfig()):
    """Mini-batch descent with spectral normalisation after every step.

    Returns (final normalised net, per-epoch training loss).
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    net = net.copy()
    X, Y = data.inputs, data.targets
    n = len(X)
    curve = []
    if cfg.optimizer == "adam":
        mW = [np.zeros_like(W) for W in net.weights]
        vW = [np.zeros_like(W) for W in net.weights]
        mb = [np.zeros_like(b) for b in net.biases]
        vb = [np.zeros_like(b) for b in net.biases]
        step = 0
    elif cfg.optimizer != "sgd":
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            loss, gW, gb = loss_and_grads(net, X[idx], Y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            if cfg.optimizer == "sgd":
                for k in range(net.n_layers):
                    net.weights[k] -= cfg.lr * gW[k]
                    net.biases[k] -= cfg.lr * gb[k]
            else:
                step += 1
                b1, b2, eps = 0.9, 0.999, 1e-8
                c1, c2 = 1 - b1 ** step, 1 - b2 ** step
                for k in range(net.n_layers):
                    mW[k] = b1 * mW[k] + (1 - b1) * gW[k]
                    vW[k] = b2 * vW[k] + (1 - b2) * gW[k] ** 2
                    mb[k] = b1 * mb[k] + (1 - b1) * gb[k]
                    vb[k] = b2 * vb[k] + (1 - b2) * gb[k] ** 2
                    net.weights[k] -= cfg.lr * (mW[k] / c1) / (np.sqrt(vW[k] / c2) + eps)
                    net.biases[k] -= cfg.lr * (mb[k] / c1) / (np.sqrt(vb[k] / c2) + eps)
            net = normalize(net, steps=cfg.power_steps)
        ep_loss = mse(net, X, Y)
        if not math.isfinite(ep_loss):
            raise TrainingDivergedError(f"non-finite loss after epoch {epoch}")
        curve.append(ep_loss)
    return normalize(net), np.array(curve)


# ------------------------------------------------------------ datasets

def dataset_from_logs(logs, features, stride=10, provenance=None) -> TrainingSet:
    """Pair measured states with the logged ground-truth disturbance."""
    Xs, Ys, prov = [], [], []
    for k, lg in enumerate(logs):
        Xs.append(np.asarray(lg.x)[::stride][:, list(features)])
        Ys.append(np.asarray(lg.d)[::stride])
        prov.append(getattr(lg, "name", None) or (provenance[k] if provenance else f"log{k}"))
    return TrainingSet(np.vstack(Xs), np.vstack(Ys), prov)


def grid_dataset(model, dist, features, count=12) -> TrainingSet:
    """True d on a grid over the feature coordinates; other coordinates at the box centre."""
    centre = model.x_box.mean(axis=1)
    axes = [np.linspace(*model.x_box[k], count) for k in features]
    grids = np.meshgrid(*axes, indexing="ij")
    F = np.stack([g.ravel() for g in grids], axis=1)
    X = np.tile(centre, (len(F), 1))
    X[:, list(features)] = F
    return TrainingSet(F, np.array([dist(x) for x in X]), [f"grid{count}"])


def make_dataset_tiers(no_learning_logs, low_vz_logs, model, dist, features, stride=10,
                       grid_count=12):
    """poor: the no-learning task runs; moderate: poor plus low-v_z runs; good: grid of true d."""
    poor = dataset_from_logs(no_learning_logs, features, stride)
    moderate = poor.union(dataset_from_logs(low_vz_logs, features, stride))
    good = grid_dataset(model, dist, features, grid_count)
    return {"poor": poor, "moderate": moderate, "good": good}


def sampled_lipschitz(fn, lo, hi, n_pairs=10_000, seed=0):
    """Largest |fn(x) - fn(y)| / |x - y| over random pairs in a box."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    X = lo + (hi - lo) * rng.random((n_pairs, lo.size))
    Y = lo + (hi - lo) * rng.random((n_pairs, lo.size))
    num = np.linalg.norm(fn(X) - fn(Y), axis=1)
    den = np.linalg.norm(X - Y, axis=1)
    return float(np.max(num / den))
