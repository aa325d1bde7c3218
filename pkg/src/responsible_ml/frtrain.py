"""Adversarial training that is both fair and robust, at toy scale.

Three small networks train in alternation on every batch:

* a fairness discriminator predicts the sensitive group from the
  classifier's output probability (optionally also from the true label);
* a robustness discriminator tells (features, prediction, label) tuples of
  the possibly poisoned training set from those of a small clean
  validation set;
* the classifier minimises its weighted log loss while maximising both
  discriminators' losses.

After every epoch the robustness discriminator's clean-probability becomes
the example weight, blended in by a linear ramp so that early (unreliable)
discriminator outputs are ignored.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .dataset import DataError, Dataset
from .model import (LinearModel, ShuffleSampler, TrainConfig, TrainingError, backward,
                    classify_matrix, forward, gradient, init_model, initial_model,
                    input_gradient, sgd_step, sigmoid)


@dataclass(frozen=True)
class FRConfig:
    lam_fair: float = 0.5
    lam_robust: float = 0.1
    ramp: tuple[int, int] | None = (5, 20)  # (start epoch, full-strength epoch)
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    lr: float = 0.1
    lr_fair: float = 0.1
    lr_robust: float = 0.1
    weight_decay: float = 0.0
    hidden: int | None = None
    fair_hidden: int | None = None
    robust_hidden: int | None = None
    fair_uses_label: bool = False
    w_min: float = 0.1
    disc_steps: int = 1

    def __post_init__(self):
        if self.lam_fair < 0 or self.lam_robust < 0:
            raise ValueError("adversarial weights must be >= 0")
        if self.ramp is not None:
            start, full = self.ramp
            if not 0 <= start <= full <= self.epochs:
                raise ValueError("need 0 <= ramp start <= full-strength epoch <= epochs")
        if not 0.0 < self.w_min <= 1.0:
            raise ValueError("w_min must lie in (0, 1]")

    def classifier_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed, weight_decay=self.weight_decay, hidden=self.hidden)

    def ramp_at(self, completed_epochs: int) -> float:
        if self.ramp is None:
            return 0.0
        start, full = self.ramp
        if completed_epochs <= start:
            return 0.0
        if completed_epochs >= full:
            return 1.0
        return (completed_epochs - start) / (full - start)


@dataclass
class FRDiagnostics:
    rows: list[dict] = field(default_factory=list)
    weights: np.ndarray | None = None
    fair_disc: LinearModel | None = None
    robust_disc: LinearModel | None = None
    aborted_epoch: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        if not self.rows:
            return ""
        w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()


def _fair_inputs(p: np.ndarray, y: np.ndarray, with_label: bool) -> np.ndarray:
    cols = [p] + ([y.astype(float)] if with_label else [])
    return np.column_stack(cols)


def robust_inputs(X: np.ndarray, p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(x, yhat, y) tuple plus the agreement term (2y-1)(2yhat-1).

    A linear discriminator cannot express label/prediction disagreement from
    ``yhat`` and ``y`` alone; the product term makes flipped labels visible.
    """
    y = y.astype(float)
    return np.column_stack([X, p, y, (2 * y - 1) * (2 * p - 1)])


def _robust_dp_columns(X: np.ndarray, p: np.ndarray, y: np.ndarray) -> np.ndarray:
    # d(robust input)/d(yhat), per row, for the columns built in robust_inputs
    k = X.shape[1]
    J = np.zeros((len(p), k + 3))
    J[:, k] = 1.0
    J[:, k + 2] = 2.0 * (2 * y.astype(float) - 1)
    return J


def _disc_step(disc: LinearModel, F: np.ndarray, target: np.ndarray, lr: float) -> None:
    g = gradient(disc, F, target, np.ones(len(target)))
    sgd_step(disc, g, len(target), TrainConfig(lr=lr, epochs=1, batch_size=1))


def train_frtrain(train: Dataset, validation: Dataset, cfg: FRConfig = FRConfig(),
                  flip_mask=None) -> tuple[LinearModel, FRDiagnostics]:
    """Train the classifier against both discriminators.

    ``flip_mask`` (indices of known-poisoned examples) only feeds the
    diagnostics. With both adversarial weights at 0 and ``ramp=None`` the
    classifier follows exactly the trajectory of :func:`model.train_sgd`.
    """
    if len(train) == 0 or len(validation) == 0:
        raise DataError("train and validation sets must be non-empty")
    if train.input_dim != validation.input_dim:
        raise DataError("train and validation schemas differ")
    if len(train.groups) != 2:
        raise DataError("FR-Train needs exactly two groups")
    tcfg = cfg.classifier_config()
    X, y, w0 = train.encode(), train.labels, train.weights
    z = train.group_index.astype(float)
    Xv, yv = validation.encode(), validation.labels
    clf = initial_model(train, tcfg)
    sampler = ShuffleSampler(len(train), cfg.batch_size, cfg.seed)
    drng = np.random.default_rng([cfg.seed, 3])
    fair = init_model(2 if cfg.fair_uses_label else 1, cfg.fair_hidden, rng=drng)
    robust = init_model(X.shape[1] + 3, cfg.robust_hidden, rng=drng)
    vrng = np.random.default_rng([cfg.seed, 4])
    ex_w = np.ones(len(train))
    flipped = None
    if flip_mask is not None:
        flipped = np.zeros(len(train), dtype=bool)
        flipped[np.asarray(flip_mask, dtype=int)] = True
    diag = FRDiagnostics()

    for epoch in range(cfg.epochs):
        for step in range(sampler.steps_per_epoch):
            idx = sampler.next_batch(epoch, step)
            if len(idx) == 0:
                continue
            try:
                Xb, yb, zb = X[idx], y[idx], z[idx]
                logit, cache = forward(clf, Xb)
                p = sigmoid(logit)
                vidx = vrng.integers(0, len(validation), size=len(idx))
                pv = sigmoid(forward(clf, Xv[vidx])[0])
                for _ in range(cfg.disc_steps):
                    _disc_step(fair, _fair_inputs(p, yb, cfg.fair_uses_label), zb, cfg.lr_fair)
                    R_in = np.vstack([robust_inputs(Xb, p, yb), robust_inputs(Xv[vidx], pv, yv[vidx])])
                    R_target = np.concatenate([np.zeros(len(idx)), np.ones(len(idx))])
                    _disc_step(robust, R_in, R_target, cfg.lr_robust)

                grads = gradient(clf, Xb, yb, w0[idx] * ex_w[idx])
                dlogit = np.zeros(len(idx))
                dp = p * (1.0 - p)
                if cfg.lam_fair > 0:
                    F = _fair_inputs(p, yb, cfg.fair_uses_label)
                    fl, fc = forward(fair, F)
                    dF = input_gradient(fair, fc, sigmoid(fl) - zb)[:, 0]
                    dlogit -= cfg.lam_fair * dF * dp
                if cfg.lam_robust > 0:
                    Rtr = robust_inputs(Xb, p, yb)
                    rl, rc = forward(robust, Rtr)
                    dR = input_gradient(robust, rc, sigmoid(rl))
                    dR = (dR * _robust_dp_columns(Xb, p, yb)).sum(axis=1)
                    dlogit -= cfg.lam_robust * dR * dp
                if cfg.lam_fair > 0 or cfg.lam_robust > 0:
                    extra = backward(clf, cache, dlogit)
                    grads = {k: grads[k] + extra[k] for k in grads}
                sgd_step(clf, grads, len(idx), tcfg)
            except TrainingError:
                diag.aborted_epoch = epoch
                raise TrainingError(f"FR-Train diverged in epoch {epoch}") from None

        p_all = sigmoid(forward(clf, X)[0])
        ramp = cfg.ramp_at(epoch + 1)
        if ramp > 0:
            p_clean = sigmoid(forward(robust, robust_inputs(X, p_all, y))[0])
            ex_w = np.clip(ramp * p_clean + (1.0 - ramp), cfg.w_min, 1.0)
        yhat = (p_all > 0.5).astype(int)
        row = {
            "epoch": epoch,
            "accuracy": metrics.accuracy(yhat, train),
            "dp": metrics.demographic_parity(yhat, train),
            "fair_disc_acc": float(np.mean((sigmoid(forward(fair, _fair_inputs(p_all, y, cfg.fair_uses_label))[0]) > 0.5) == (z > 0.5))),
            "robust_disc_acc": _robust_accuracy(robust, X, p_all, y, Xv, clf, yv),
            "ramp": ramp,
            "mean_weight": float(ex_w.mean()),
            "min_weight": float(ex_w.min()),
        }
        if flipped is not None:
            row["mean_weight_flipped"] = float(ex_w[flipped].mean()) if flipped.any() else float("nan")
            row["mean_weight_clean"] = float(ex_w[~flipped].mean()) if (~flipped).any() else float("nan")
        if not np.isfinite(row["accuracy"]) or not all(np.all(np.isfinite(v)) for v in clf.params.values()):
            diag.aborted_epoch = epoch
            raise TrainingError(f"FR-Train diverged in epoch {epoch}")
        diag.rows.append(row)

    diag.weights = ex_w
    diag.fair_disc, diag.robust_disc = fair, robust
    return clf, diag


def _robust_accuracy(robust, X, p, y, Xv, clf, yv) -> float:
    # balanced accuracy over train (label 0) and validation (label 1) tuples
    pt = sigmoid(forward(robust, robust_inputs(X, p, y))[0])
    pv_clf = sigmoid(forward(clf, Xv)[0])
    pv = sigmoid(forward(robust, robust_inputs(Xv, pv_clf, yv))[0])
    return float(0.5 * np.mean(pt <= 0.5) + 0.5 * np.mean(pv > 0.5))


def evaluate_tradeoff(model, clean_test: Dataset) -> tuple[float, float]:
    """(accuracy, demographic parity) of hard predictions on clean data."""
    if len(clean_test) == 0:
        raise DataError("empty test set")
    if isinstance(model, LinearModel):
        yhat = classify_matrix(model, clean_test.encode())
    else:
        yhat = model.predict(clean_test)
    return metrics.accuracy(yhat, clean_test), metrics.demographic_parity(yhat, clean_test)
