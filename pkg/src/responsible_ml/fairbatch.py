"""Fairness-aware batch selection.

Each batch is filled from the four (group, label) cells. The share of the
label-0 portion drawn from group 0 is ``lam1`` and that of the label-1
portion is ``lam2``; between epochs the sampler nudges each rate towards
whichever group the current model serves worse. Plug the sampler into
:func:`model.train_sgd` in place of the default shuffling sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset import DataError, Dataset
from .metrics import FairnessReport

EO = "eo"
DP = "dp"


@dataclass(frozen=True)
class SamplingRates:
    lam1: float  # P(draw from group 0 | label 0 portion)
    lam2: float  # P(draw from group 0 | label 1 portion)
    label0_share: float  # fraction of each batch with label 0, fixed

    def __post_init__(self):
        for v in (self.lam1, self.lam2, self.label0_share):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"rate {v} outside [0,1]")

    def lam(self, y: int) -> float:
        return self.lam2 if y else self.lam1


@dataclass(frozen=True)
class FairBatchConfig:
    target: str = EO
    alpha: float = 0.005
    clip: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.target not in (EO, DP):
            raise ValueError(f"unknown fairness target {self.target!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        lo, hi = self.clip
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("clip bounds must satisfy 0 <= lo <= hi <= 1")


def init_rates(d: Dataset) -> SamplingRates:
    """Start at the empirical P(Z=0 | Y=y) and the empirical label prior."""
    if len(d.groups) != 2:
        raise DataError("FairBatch needs exactly two groups")
    cells = d.cells()
    for (z, y), idx in cells.items():
        if len(idx) == 0:
            raise DataError(f"empty cell (group={d.groups[z]!r}, label={y})")
    n = {k: len(v) for k, v in cells.items()}
    lam = [n[(0, y)] / (n[(0, y)] + n[(1, y)]) for y in (0, 1)]
    label0 = (n[(0, 0)] + n[(1, 0)]) / len(d)
    return SamplingRates(lam[0], lam[1], label0)


def _signed_step(a: float, b: float, alpha: float) -> float:
    # group 0 worse (a < b) -> give it more of the batch
    if a < b:
        return alpha
    if a > b:
        return -alpha
    return 0.0


def update_rates(rates: SamplingRates, report: FairnessReport, cfg: FairBatchConfig) -> SamplingRates:
    """One signed step of size ``alpha`` per rate, then clip."""
    lo, hi = cfg.clip
    if cfg.target == EO:
        steps = [_signed_step(report.cell_accuracy(0, y), report.cell_accuracy(1, y), cfg.alpha)
                 for y in (0, 1)]
    else:
        g0, g1 = report.groups
        s = _signed_step(report.positive_rates[g0], report.positive_rates[g1], cfg.alpha)
        # raise group 0's positive rate by moving its share from the negative to the positive portion
        steps = [-s, s]
    return replace(rates,
                   lam1=float(np.clip(rates.lam1 + steps[0], lo, hi)),
                   lam2=float(np.clip(rates.lam2 + steps[1], lo, hi)))


def cell_counts(rates: SamplingRates, batch_size: int) -> dict[tuple[int, int], int]:
    """Per-cell batch quotas, rounded by largest remainder so they sum to ``batch_size``."""
    share = {}
    for y in (0, 1):
        py = rates.label0_share if y == 0 else 1.0 - rates.label0_share
        share[(0, y)] = py * rates.lam(y)
        share[(1, y)] = py * (1.0 - rates.lam(y))
    keys = sorted(share)
    exact = np.array([batch_size * share[k] for k in keys])
    base = np.floor(exact).astype(int)
    short = batch_size - int(base.sum())
    # stable sort keeps ties in cell order
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:short]] += 1
    return dict(zip(keys, base.tolist()))


class StratifiedSampler:
    """Batches composed from (group, label) cells at fixed rates, drawn with replacement."""

    needs_feedback = False

    def __init__(self, d: Dataset, batch_size: int, seed: int = 0,
                 rates: SamplingRates | None = None):
        if batch_size < 4:
            raise ValueError("batch size must be >= 4 (one slot per cell)")
        self.cells = d.cells()
        self.batch_size = batch_size
        self.seed = seed
        self.rates = rates or init_rates(d)
        self.steps_per_epoch = math.ceil(len(d) / batch_size)

    def next_batch(self, epoch, step, feedback=None):
        rng = np.random.default_rng([self.seed, 2, epoch, step])
        parts = []
        for key, k in cell_counts(self.rates, self.batch_size).items():
            if k == 0:
                continue
            pool = self.cells[key]
            if len(pool) == 0:
                raise DataError(f"cell {key} is empty but needs {k} draws")
            parts.append(pool[rng.integers(0, len(pool), size=k)])
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


class FairBatchSampler(StratifiedSampler):
    """Stratified sampler whose rates adapt once per epoch from model feedback."""

    needs_feedback = True

    def __init__(self, d: Dataset, cfg: FairBatchConfig, batch_size: int, seed: int = 0):
        super().__init__(d, batch_size, seed)
        self.cfg = cfg
        # rows of (epoch, lam1, lam2, eo disparity of the model entering the epoch)
        self.trajectory: list[tuple[int, float, float, float]] = []

    def next_batch(self, epoch, step, feedback=None):
        if step == 0:
            if feedback is not None and epoch > 0:
                self.rates = update_rates(self.rates, feedback, self.cfg)
            disparity = feedback.eo_disparity if feedback is not None else float("nan")
            self.trajectory.append((epoch, self.rates.lam1, self.rates.lam2, disparity))
        return super().next_batch(epoch, step)


def make_fairbatch_sampler(d: Dataset, cfg: FairBatchConfig, seed: int = 0,
                           batch_size: int = 32) -> FairBatchSampler:
    return FairBatchSampler(d, cfg, batch_size, seed)
