"""Fairness and accuracy measures for binary classifiers over a binary group."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import DataError, Dataset

PROB_CLAMP = 1e-7


def _binary_groups(d: Dataset) -> None:
    if len(d.groups) != 2:
        raise DataError(f"measure needs exactly two groups, dataset has {len(d.groups)}")


def _aligned(preds, d: Dataset) -> np.ndarray:
    p = np.asarray(preds, dtype=np.float64).ravel()
    if len(p) != len(d):
        raise DataError(f"{len(p)} predictions for {len(d)} examples")
    return p


def positive_rates(preds, d: Dataset) -> np.ndarray:
    """P(Yhat=1 | Z=z) for every group, unweighted."""
    p = _aligned(preds, d)
    rates = np.empty(len(d.groups))
    for z, g in enumerate(d.groups):
        members = d.group_index == z
        if not members.any():
            raise DataError(f"group {g!r} is empty")
        rates[z] = p[members].mean()
    return rates


def dp_from_rates(r0: float, r1: float) -> float:
    if r0 == r1:
        return 1.0
    if r0 == 0.0 or r1 == 0.0:
        return 0.0
    return float(min(r0 / r1, r1 / r0))


def demographic_parity(preds, d: Dataset) -> float:
    """min of the two positive-rate ratios; 1 is perfect parity."""
    _binary_groups(d)
    r0, r1 = positive_rates(preds, d)
    return dp_from_rates(r0, r1)


def cell_positive_rates(preds, d: Dataset) -> np.ndarray:
    """Array ``r[z, y] = P(Yhat=1 | Z=z, Y=y)``."""
    p = _aligned(preds, d)
    out = np.empty((len(d.groups), 2))
    for (z, y), idx in d.cells().items():
        if len(idx) == 0:
            raise DataError(f"empty cell (group={d.groups[z]!r}, label={y})")
        out[z, y] = p[idx].mean()
    return out


def equalized_odds_disparity(preds, d: Dataset) -> float:
    """Worst label-conditioned gap in positive rate between the two groups."""
    _binary_groups(d)
    r = cell_positive_rates(preds, d)
    return float(np.max(np.abs(r[0] - r[1])))


def accuracy(preds, d: Dataset, weighted: bool = False) -> float:
    p = _aligned(preds, d)
    correct = (p == d.labels).astype(np.float64)
    w = d.weights if weighted else np.ones(len(d))
    total = w.sum()
    if total <= 0:
        raise DataError("accuracy undefined: total weight is zero")
    return float((w * correct).sum() / total)


def weighted_positive_rate(d: Dataset, group: str) -> float:
    """Weighted share of positive labels inside ``group``."""
    if group not in d.groups:
        raise DataError(f"unknown group {group!r}")
    members = d.group_index == d.groups.index(group)
    w = d.weights[members]
    if w.sum() <= 0:
        raise DataError(f"group {group!r} has no positive weight")
    return float(w[d.labels[members] == 1].sum() / w.sum())


def per_example_losses(probabilities, d: Dataset) -> np.ndarray:
    p = np.clip(_aligned(probabilities, d), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = d.labels
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


def logistic_loss(probabilities, d: Dataset, weighted: bool = True) -> float:
    losses = per_example_losses(probabilities, d)
    if len(losses) == 0:
        return 0.0
    w = d.weights if weighted else np.ones(len(d))
    if w.sum() <= 0:
        raise DataError("loss undefined: total weight is zero")
    return float(np.average(losses, weights=w))


def equalized_error_rate_gap(per_slice_losses) -> float:
    losses = np.asarray(per_slice_losses, dtype=float)
    if losses.size == 0:
        raise DataError("need at least one slice loss")
    return float(losses.max() - losses.min())


@dataclass
class FairnessReport:
    dp: float
    eo_disparity: float
    accuracy: float
    groups: tuple[str, ...]
    positive_rates: dict[str, float] = field(default_factory=dict)
    cell_accuracies: dict[tuple[str, int], float] = field(default_factory=dict)

    def cell_accuracy(self, z: int, y: int) -> float:
        return self.cell_accuracies[(self.groups[z], y)]

    def to_dict(self) -> dict:
        out = {"dp": self.dp, "eo_disparity": self.eo_disparity, "accuracy": self.accuracy}
        for g, r in self.positive_rates.items():
            out[f"positive_rate[{g}]"] = r
        for (g, y), a in self.cell_accuracies.items():
            out[f"accuracy[{g},y={y}]"] = a
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def fairness_report(preds, d: Dataset) -> FairnessReport:
    """Collect DP, equalized-odds disparity, accuracy and per-cell rates."""
    _binary_groups(d)
    p = _aligned(preds, d)
    rates = positive_rates(p, d)
    cells = cell_positive_rates(p, d)
    cell_acc = {}
    for z, g in enumerate(d.groups):
        cell_acc[(g, 0)] = float(1.0 - cells[z, 0])
        cell_acc[(g, 1)] = float(cells[z, 1])
    return FairnessReport(
        dp=dp_from_rates(*rates),
        eo_disparity=float(np.max(np.abs(cells[0] - cells[1]))),
        accuracy=accuracy(p, d),
        groups=d.groups,
        positive_rates={g: float(r) for g, r in zip(d.groups, rates)},
        cell_accuracies=cell_acc,
    )
