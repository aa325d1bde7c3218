"""Logistic models (optionally with one hidden layer) trained by mini-batch SGD.

Gradients are derived by hand. The training loop draws batches from a
pluggable sampler, which may ask for a fairness report of the current model
at every epoch boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import metrics
from .dataset import NUMERIC, DataError, Dataset


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or gradient)."""


def sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


@dataclass
class LinearModel:
    """Parameters plus architecture; treat as immutable once returned."""

    input_dim: int
    hidden: int | None = None
    activation: str = "tanh"
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def names(self) -> tuple[str, ...]:
        return ("W1", "b1", "W2", "b2") if self.hidden else ("W", "b")

    def copy(self) -> "LinearModel":
        return LinearModel(self.input_dim, self.hidden, self.activation,
                           {k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.names])

    def with_flat(self, theta: np.ndarray) -> "LinearModel":
        out, pos = self.copy(), 0
        for k in self.names:
            n = self.params[k].size
            out.params[k] = theta[pos:pos + n].reshape(self.params[k].shape).copy()
            pos += n
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "activation": self.activation,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearModel":
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        return cls(doc["input_dim"], doc.get("hidden"), doc.get("activation", "tanh"), params)


def save_model(model: LinearModel, path: str | Path) -> None:
    # json writes floats with repr, which round-trips exactly
    Path(path).write_text(json.dumps(model.to_dict()), encoding="utf-8")


def load_model(path: str | Path) -> LinearModel:
    return LinearModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_model(input_dim: int, hidden: int | None = None, activation: str = "tanh",
               rng: np.random.Generator | int = 0) -> LinearModel:
    """Uniform(-0.5, 0.5) / sqrt(fan_in) weights, zero biases."""
    if activation not in ("tanh", "relu"):
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(rng)
    fan = max(input_dim, 1)
    if hidden:
        params = {
            "W1": rng.uniform(-0.5, 0.5, (input_dim, hidden)) / math.sqrt(fan),
            "b1": np.zeros(hidden),
            "W2": rng.uniform(-0.5, 0.5, (hidden, 1)) / math.sqrt(hidden),
            "b2": np.zeros(1),
        }
    else:
        params = {"W": rng.uniform(-0.5, 0.5, (input_dim, 1)) / math.sqrt(fan), "b": np.zeros(1)}
    return LinearModel(input_dim, hidden, activation, params)


def _act(model, a):
    return np.tanh(a) if model.activation == "tanh" else np.maximum(a, 0.0)


def _act_grad(model, a, h):
    return 1.0 - h * h if model.activation == "tanh" else (a > 0).astype(float)


def forward(model: LinearModel, X: np.ndarray):
    """Return logits and whatever the backward pass needs."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DataError(f"model expects {model.input_dim} inputs, got shape {X.shape}")
    p = model.params
    if model.hidden:
        a = X @ p["W1"] + p["b1"]
        h = _act(model, a)
        return (h @ p["W2"] + p["b2"]).ravel(), (X, a, h)
    return (X @ p["W"] + p["b"]).ravel(), (X,)


def backward(model: LinearModel, cache, dlogit: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(logit) per row."""
    g = np.asarray(dlogit, dtype=np.float64).reshape(-1, 1)
    if model.hidden:
        X, a, h = cache
        dh = (g @ model.params["W2"].T) * _act_grad(model, a, h)
        return {"W1": X.T @ dh, "b1": dh.sum(axis=0), "W2": h.T @ g, "b2": g.sum(axis=0)}
    (X,) = cache
    return {"W": X.T @ g, "b": g.sum(axis=0)}


def input_gradient(model: LinearModel, cache, dlogit: np.ndarray) -> np.ndarray:
    """d(loss)/d(input) per row, for chaining through a model used as a sub-network."""
    g = np.asarray(dlogit, dtype=np.float64).reshape(-1, 1)
    if model.hidden:
        _, a, h = cache
        dh = (g @ model.params["W2"].T) * _act_grad(model, a, h)
        return dh @ model.params["W1"].T
    return g @ model.params["W"].T


def predict_proba(model: LinearModel, X: np.ndarray) -> np.ndarray:
    return sigmoid(forward(model, X)[0])


def predict(model: LinearModel, d: Dataset) -> np.ndarray:
    """Probability of the positive label for every example of ``d``."""
    return predict_proba(model, d.encode())


def classify(model: LinearModel, d: Dataset, threshold: float = 0.5) -> np.ndarray:
    return (predict(model, d) > threshold).astype(np.int64)


def loss_sum(model: LinearModel, X, y, w) -> float:
    """Sum of weighted logistic losses (no clamping; used by gradient checks)."""
    z, _ = forward(model, X)
    y = np.asarray(y, dtype=float)
    # log(1 + e^z) - y z, stable form
    return float(np.sum(np.asarray(w, dtype=float) * (np.logaddexp(0.0, z) - y * z)))


def gradient(model: LinearModel, X, y, w) -> dict[str, np.ndarray]:
    """Exact gradient of ``sum_i w_i * logloss_i`` over the batch."""
    z, cache = forward(model, X)
    if not np.all(np.isfinite(z)):
        raise TrainingError("non-finite logits (loss diverged)")
    dlogit = np.asarray(w, dtype=float) * (sigmoid(z) - np.asarray(y, dtype=float))
    return backward(model, cache, dlogit)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    hidden: int | None = None
    activation: str = "tanh"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ValueError("epochs >= 0, batch_size >= 1, weight_decay >= 0 required")


class BatchSampler(Protocol):
    steps_per_epoch: int
    needs_feedback: bool

    def next_batch(self, epoch: int, step: int,
                   feedback: metrics.FairnessReport | None = None) -> np.ndarray: ...


class ShuffleSampler:
    """Plain SGD: one seeded permutation per epoch, cut into consecutive batches."""

    needs_feedback = False

    def __init__(self, n: int, batch_size: int, seed: int = 0):
        if n < 1:
            raise DataError("cannot sample from an empty dataset")
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self.steps_per_epoch = math.ceil(n / batch_size)
        self._perm: tuple[int, np.ndarray] | None = None

    def next_batch(self, epoch, step, feedback=None):
        if self._perm is None or self._perm[0] != epoch:
            self._perm = (epoch, np.random.default_rng([self.seed, 1, epoch]).permutation(self.n))
        return self._perm[1][step * self.batch_size:(step + 1) * self.batch_size]


def sgd_step(model: LinearModel, grads: dict[str, np.ndarray], batch_len: int,
             cfg: TrainConfig) -> None:
    """In-place update: mean batch gradient plus L2 on weight matrices."""
    for k in model.names:
        g = grads[k] / batch_len
        if cfg.weight_decay and k.startswith("W"):
            g = g + cfg.weight_decay * model.params[k]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
        model.params[k] = model.params[k] - cfg.lr * g


def initial_model(d: Dataset, cfg: TrainConfig) -> LinearModel:
    return init_model(d.input_dim, cfg.hidden, cfg.activation, np.random.default_rng([cfg.seed, 0]))


def train_sgd(d: Dataset, cfg: TrainConfig, sampler: BatchSampler | None = None,
              model: LinearModel | None = None) -> LinearModel:
    """Mini-batch gradient descent on the weighted logistic loss.

    The sampler defaults to :class:`ShuffleSampler`. Samplers with
    ``needs_feedback`` receive a :class:`~metrics.FairnessReport` of the
    current model at step 0 of every epoch.
    """
    if len(d) == 0:
        raise DataError("cannot train on an empty dataset")
    X, y, w = d.encode(), d.labels, d.weights
    model = (model or initial_model(d, cfg)).copy()
    sampler = sampler or ShuffleSampler(len(d), cfg.batch_size, cfg.seed)
    for epoch in range(cfg.epochs):
        for step in range(sampler.steps_per_epoch):
            feedback = None
            if step == 0 and sampler.needs_feedback:
                feedback = metrics.fairness_report(classify_matrix(model, X), d)
            idx = sampler.next_batch(epoch, step, feedback)
            if len(idx) == 0:
                continue
            grads = gradient(model, X[idx], y[idx], w[idx])
            sgd_step(model, grads, len(idx), cfg)
    return model


def classify_matrix(model: LinearModel, X: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (predict_proba(model, X) > threshold).astype(np.int64)


# ---------------------------------------------------------------------------
# single-feature threshold classifiers


@dataclass(frozen=True)
class ThresholdClassifier:
    """Predicts 1 when ``feature > threshold``."""

    feature: str
    threshold: float

    def predict(self, d: Dataset) -> np.ndarray:
        x = np.array([e.features[self.feature] for e in d.examples], dtype=float)
        return (x > self.threshold).astype(np.int64)


def threshold_candidates(d: Dataset, feature: str) -> list[float]:
    """One threshold per distinct cut position, in increasing order."""
    if d.spec(feature).kind != NUMERIC:
        raise DataError(f"feature {feature!r} is not numeric")
    u = np.unique([e.features[feature] for e in d.examples])
    if len(u) == 0:
        raise DataError("no examples")
    return [float(u[0] - 1.0)] + [float(t) for t in (u[:-1] + u[1:]) / 2.0] + [float(u[-1])]


def _scan(d: Dataset, feature: str, dp_min: float | None) -> ThresholdClassifier:
    best, best_acc = None, -1.0
    for t in threshold_candidates(d, feature):
        clf = ThresholdClassifier(feature, t)
        yhat = clf.predict(d)
        if dp_min is not None and metrics.demographic_parity(yhat, d) < dp_min:
            continue
        acc = metrics.accuracy(yhat, d)
        if acc > best_acc:  # strict: ties keep the smaller threshold
            best, best_acc = clf, acc
    if best is None:
        raise DataError(f"no threshold on {feature!r} reaches DP >= {dp_min}")
    return best


def fit_threshold_max_accuracy(d: Dataset, feature: str) -> ThresholdClassifier:
    return _scan(d, feature, None)


def fit_threshold_fair(d: Dataset, feature: str, dp_min: float) -> ThresholdClassifier:
    """Most accurate cut among those whose demographic parity is at least ``dp_min``."""
    if len(d.groups) != 2:
        raise DataError("fair threshold needs exactly two groups")
    return _scan(d, feature, dp_min)
