"""Selective data acquisition driven by per-slice learning curves.

Each slice gets a power-law learning curve ``loss(n) = b * n**(-a)``. Given a
budget, :func:`optimize_allocation` decides how many examples to buy per
slice by trading total loss against a penalty on slices whose loss is above
the average. :func:`plan_acquisition` alternates between solving that
problem and buying data, re-fitting the curves whenever the imbalance ratio
of slice sizes has drifted too far.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from . import metrics
from .dataset import DataError, Dataset, Example, SlicePredicate
from .model import TrainConfig, predict, train_sgd


@dataclass(frozen=True)
class LearningCurve:
    b: float
    a: float
    residual: float = 0.0

    def __post_init__(self):
        if not (self.b > 0 and self.a >= 0):
            raise ValueError(f"invalid learning curve b={self.b}, a={self.a}")

    def __call__(self, n):
        return self.b * np.power(n, -self.a)


def fit_learning_curve(points: Sequence[tuple[float, float]], min_points: int = 2) -> LearningCurve:
    """Least squares on ``log loss = log b - a log n``; the exponent is floored at 0.

    ``residual`` is the root-mean-square log-space error of the returned curve.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n, loss = pts[:, 0], pts[:, 1]
    if np.any(n < 1):
        raise DataError("learning-curve sizes must be >= 1")
    if np.any(loss <= 0):
        raise DataError("learning-curve losses must be > 0")
    if len(np.unique(n)) < min_points:
        raise DataError(f"need at least {min_points} distinct sizes, got {len(np.unique(n))}")
    x, y = np.log(n), np.log(loss)
    xc = x - x.mean()
    slope = float((xc * (y - y.mean())).sum() / (xc * xc).sum())
    a = max(0.0, -slope)
    # with a fixed, the best intercept is the mean of y + a x
    logb = float((y + a * x).mean())
    resid = float(np.sqrt(np.mean((y - (logb - a * x)) ** 2)))
    return LearningCurve(math.exp(logb), a, resid)


# ---------------------------------------------------------------------------
# the allocation problem


@dataclass(frozen=True)
class AcquisitionProblem:
    sizes: tuple[float, ...]
    curves: tuple[LearningCurve, ...]
    costs: tuple[float, ...]
    budget: float
    lam: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(float(s) for s in self.sizes))
        object.__setattr__(self, "curves", tuple(self.curves))
        object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
        k = len(self.sizes)
        if k == 0 or len(self.curves) != k or len(self.costs) != k:
            raise ValueError("sizes, curves and costs must be non-empty and aligned")
        if any(s < 1 for s in self.sizes):
            raise ValueError("slice sizes must be >= 1")
        if any(not c > 0 for c in self.costs):
            raise ValueError("unit costs must be > 0")
        if self.budget < 0 or self.lam < 0:
            raise ValueError("budget and lambda must be >= 0")

    @property
    def average_loss(self) -> float:
        """Mean current estimated loss; held fixed while solving."""
        return float(np.mean([c(s) for c, s in zip(self.curves, self.sizes)]))

    def losses(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        s = np.asarray(self.sizes)
        b = np.array([c.b for c in self.curves])
        a = np.array([c.a for c in self.curves])
        return b * np.power(s + d, -a)

    def objective(self, d) -> float:
        L = self.losses(d)
        A = self.average_loss
        return float(L.sum() + self.lam * np.maximum(0.0, L / A - 1.0).sum())


@dataclass(frozen=True)
class Allocation:
    amounts: tuple[float, ...]
    objective: float = float("nan")
    iterations: int = 0

    def __iter__(self):
        return iter(self.amounts)

    def __getitem__(self, i):
        return self.amounts[i]

    def __len__(self):
        return len(self.amounts)


def project_budget_simplex(v, costs, budget: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{d >= 0, costs . d = budget}``."""
    v = np.asarray(v, dtype=float)
    c = np.asarray(costs, dtype=float)
    if budget == 0:
        return np.zeros_like(v)
    # d_i = max(0, v_i - theta c_i); sum c_i d_i is piecewise linear, decreasing in theta
    r = v / c
    order = np.argsort(-r)
    cs_cv = np.cumsum((c * v)[order])
    cs_cc = np.cumsum((c * c)[order])
    theta = (cs_cv - budget) / cs_cc
    # active set: largest k with r_(k) > theta_k
    k = np.nonzero(r[order] > theta)[0][-1]
    return np.maximum(0.0, v - theta[k] * c)


def optimize_allocation(p: AcquisitionProblem, iterations: int = 4000) -> Allocation:
    """Projected subgradient descent with diminishing, normalised steps.

    Returns the best iterate seen. The objective is convex in the
    allocation, so this converges to the global optimum.
    """
    k = len(p.sizes)
    c = np.asarray(p.costs)
    if p.budget == 0:
        return Allocation(tuple([0.0] * k), p.objective(np.zeros(k)), 0)
    if k == 1:
        d = np.array([p.budget / c[0]])
        return Allocation(tuple(d.tolist()), p.objective(d), 0)
    s = np.asarray(p.sizes)
    b = np.array([cv.b for cv in p.curves])
    a = np.array([cv.a for cv in p.curves])
    A = p.average_loss
    scale = p.lam / A

    d = project_budget_simplex(np.full(k, p.budget / c.sum()), c, p.budget)
    best, best_f = d.copy(), p.objective(d)
    # step length in allocation units; the feasible set spans about budget / min cost
    radius = p.budget / c.min()
    for it in range(1, iterations + 1):
        L = b * np.power(s + d, -a)
        g = -a * L / (s + d) * (1.0 + scale * (L > A))
        # project the direction onto the budget hyperplane so steps stay useful
        g = g - c * (g @ c) / (c @ c)
        gn = np.linalg.norm(g)
        if gn == 0.0:
            break
        d = project_budget_simplex(d - (0.5 * radius / math.sqrt(it)) * g / gn, c, p.budget)
        f = p.objective(d)
        if f < best_f:
            best, best_f = d.copy(), f
    return Allocation(tuple(best.tolist()), best_f, iterations)


def imbalance_ratio(sizes: Sequence[float]) -> float:
    sizes = list(sizes)
    if not sizes:
        raise ValueError("imbalance ratio of no slices")
    if min(sizes) <= 0:
        raise ValueError("slice sizes must be positive")
    return max(sizes) / min(sizes)


def baseline_uniform(sizes: Sequence[float], budget: float, costs: Sequence[float] | None = None) -> Allocation:
    """Same amount for every slice."""
    c = np.ones(len(sizes)) if costs is None else np.asarray(costs, dtype=float)
    return Allocation(tuple([budget / c.sum()] * len(sizes)))


def baseline_waterfilling(sizes: Sequence[float], budget: float,
                          costs: Sequence[float] | None = None) -> Allocation:
    """Raise the smallest slices to a common size level, spending exactly ``budget``."""
    s = np.asarray(sizes, dtype=float)
    c = np.ones(len(s)) if costs is None else np.asarray(costs, dtype=float)
    if budget == 0:
        return Allocation(tuple([0.0] * len(s)))
    order = np.argsort(s, kind="stable")
    ss, cc = s[order], c[order]
    level = ss[-1]
    spent_c = spent_cs = 0.0
    for j in range(len(ss)):
        spent_c += cc[j]
        spent_cs += cc[j] * ss[j]
        # level that the first j+1 slices reach with the whole budget
        cand = (budget + spent_cs) / spent_c
        if j == len(ss) - 1 or cand <= ss[j + 1]:
            level = cand
            break
    d = np.maximum(0.0, level - s)
    return Allocation(tuple(d.tolist()))


def integerize(amounts: Sequence[float], costs: Sequence[float], budget: float) -> list[int]:
    """Whole-example counts: floors, then largest remainders while the budget allows."""
    d = np.maximum(np.asarray(amounts, dtype=float), 0.0)
    c = np.asarray(costs, dtype=float)
    out = np.floor(d + 1e-9).astype(int)
    left = budget - float(out @ c)
    rem = d - out
    for i in np.argsort(-rem, kind="stable"):
        if rem[i] > 1e-9 and c[i] <= left + 1e-9:
            out[i] += 1
            left -= c[i]
    while True:
        ok = np.flatnonzero(c <= left + 1e-9)
        if len(ok) == 0:
            break
        i = ok[np.argmax((d - out)[ok])]
        out[i] += 1
        left -= c[i]
    return out.tolist()


# ---------------------------------------------------------------------------
# measuring learning curves


def measure_learning_points(d: Dataset, slice_pred: SlicePredicate, cfg: TrainConfig,
                            sizes: Sequence[int], trials: int = 3, seed: int = 0,
                            validation: Dataset | None = None) -> list[tuple[int, float]]:
    """Mean validation loss on a slice after training with a subsample of it.

    Training data is every example outside the slice plus the first ``n``
    members of a seeded permutation of the slice (so subsamples are nested
    within a trial). Loss is measured on the slice's members in
    ``validation`` (default: ``d`` itself).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    val = d if validation is None else validation
    members = np.flatnonzero(slice_pred.mask(d))
    others = np.flatnonzero(~slice_pred.mask(d))
    val_slice = val.subset(np.flatnonzero(slice_pred.mask(val)))
    if len(val_slice) == 0:
        raise DataError(f"slice {slice_pred} has no validation examples")
    for n in sizes:
        if n > len(members):
            raise DataError(f"size {n} exceeds slice {slice_pred} of size {len(members)}")
    totals = np.zeros(len(sizes))
    for t in range(trials):
        perm = np.random.default_rng([seed, t]).permutation(members)
        for j, n in enumerate(sizes):
            train = d.subset(np.concatenate([others, perm[:n]]))
            m = train_sgd(train, replace(cfg, seed=cfg.seed + t))
            totals[j] += metrics.logistic_loss(predict(m, val_slice), val_slice)
    return [(int(n), float(v / trials)) for n, v in zip(sizes, totals)]


class SliceEvaluator(Protocol):
    def learning_points(self, d: Dataset, slices: Sequence[SlicePredicate],
                        seed: int) -> list[list[tuple[int, float]]]: ...

    def slice_losses(self, d: Dataset, slices: Sequence[SlicePredicate]) -> list[float]: ...


def _default_sizes(n: int, fractions) -> list[int]:
    return sorted({max(1, int(round(f * n))) for f in fractions})


@dataclass
class TrainingEvaluator:
    """Measures slice losses by actually training models."""

    cfg: TrainConfig
    validation: Dataset
    fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    trials: int = 2

    def learning_points(self, d, slices, seed):
        out = []
        for i, p in enumerate(slices):
            n = int(p.mask(d).sum())
            out.append(measure_learning_points(d, p, self.cfg, _default_sizes(n, self.fractions),
                                               self.trials, seed * 1000 + i, self.validation))
        return out

    def slice_losses(self, d, slices):
        m = train_sgd(d, self.cfg)
        losses = []
        for p in slices:
            v = self.validation.subset(np.flatnonzero(p.mask(self.validation)))
            losses.append(metrics.logistic_loss(predict(m, v), v))
        return losses


@dataclass
class PowerLawEvaluator:
    """Simulated slices whose true loss is a known power law of their own size.

    Learning points carry multiplicative Gaussian noise of relative size
    ``noise``; final losses are the noiseless truth.
    """

    truth: Sequence[LearningCurve]
    noise: float = 0.05
    seed: int = 0
    fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)

    def learning_points(self, d, slices, seed):
        out = []
        for i, p in enumerate(slices):
            n = int(p.mask(d).sum())
            pts = []
            for m in _default_sizes(n, self.fractions):
                rng = np.random.default_rng([self.seed, seed, i, m])
                pts.append((m, float(self.truth[i](m) * max(1e-3, 1.0 + self.noise * rng.standard_normal()))))
            out.append(pts)
        return out

    def slice_losses(self, d, slices):
        return [float(self.truth[i](max(1, int(p.mask(d).sum())))) for i, p in enumerate(slices)]


Provider = Callable[[int, int], Sequence[Example]]


class PoolProvider:
    """Hands out examples of each slice from a reserved pool, in seeded order."""

    def __init__(self, pool: Dataset, slices: Sequence[SlicePredicate], seed: int = 0):
        rng = np.random.default_rng([seed, 7])
        self.queues = [list(rng.permutation(np.flatnonzero(p.mask(pool)))) for p in slices]
        self.pool = pool

    def __call__(self, i: int, count: int) -> list[Example]:
        q = self.queues[i]
        take, self.queues[i] = q[:count], q[count:]
        return [self.pool.examples[j] for j in take]

    def remaining(self) -> list[int]:
        return [len(q) for q in self.queues]


# ---------------------------------------------------------------------------
# the iterative planner


@dataclass(frozen=True)
class PlannerConfig:
    min_slice_size: int = 30
    tau: float = 0.2
    batch: int = 10
    costs: tuple[float, ...] | None = None
    seed: int = 0
    max_iterations: int = 50


@dataclass
class PlanIteration:
    kind: str  # "topup" or "optimize"
    sizes_before: list[int]
    curves: list[tuple[float, float]] = field(default_factory=list)
    allocation: list[float] = field(default_factory=list)
    target: list[int] = field(default_factory=list)
    acquired: list[int] = field(default_factory=list)
    imbalance_start: float = float("nan")
    imbalance_end: float = float("nan")
    refit_triggered: bool = False
    cost: float = 0.0

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in self.__dict__.items()}


@dataclass
class PlanTrace:
    iterations: list[PlanIteration]
    final_sizes: list[int]
    final_losses: list[float]
    spent: float
    budget: float
    data: Dataset | None = None
    diagnostics: list[str] = field(default_factory=list)
    points: list[list[tuple[int, float]]] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return metrics.equalized_error_rate_gap(self.final_losses)

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "spent": self.spent,
            "iterations": [it.to_dict() for it in self.iterations],
            "final_sizes": self.final_sizes,
            "final_losses": self.final_losses,
            "equalized_error_rate_gap": self.gap,
            "diagnostics": self.diagnostics,
        }


def slice_sizes(d: Dataset, slices: Sequence[SlicePredicate]) -> list[int]:
    return [int(p.mask(d).sum()) for p in slices]


def _acquire(d: Dataset, i: int, count: int, provider: Provider, diagnostics: list[str]):
    got = list(provider(i, count)) if count > 0 else []
    if len(got) < count:
        diagnostics.append(f"provider exhausted for slice {i}: wanted {count}, got {len(got)}")
    return d.concat(got), len(got)


def plan_acquisition(d: Dataset, slices: Sequence[SlicePredicate], budget: float, lam: float,
                     cfg: PlannerConfig, provider: Provider, evaluator: SliceEvaluator) -> PlanTrace:
    """Top up small slices, then repeatedly optimise, acquire and re-fit."""
    k = len(slices)
    costs = np.ones(k) if cfg.costs is None else np.asarray(cfg.costs, dtype=float)
    remaining = float(budget)
    diagnostics: list[str] = []
    iterations: list[PlanIteration] = []
    exhausted = False

    sizes = slice_sizes(d, slices)
    short = [max(0, cfg.min_slice_size - s) for s in sizes]
    if any(short) and remaining > 0:
        rec = PlanIteration("topup", list(sizes), acquired=[0] * k)
        for i in range(k):
            n = min(short[i], int((remaining + 1e-9) // costs[i]))
            d, got = _acquire(d, i, n, provider, diagnostics)
            exhausted |= got < n
            rec.acquired[i] = got
            remaining -= got * costs[i]
            rec.cost += got * costs[i]
        iterations.append(rec)

    last_points: list = []
    while (not exhausted and remaining + 1e-9 >= costs.min()
           and sum(1 for it in iterations if it.kind == "optimize") < cfg.max_iterations):
        sizes = slice_sizes(d, slices)
        if min(sizes) < 1:
            diagnostics.append("a slice is empty; cannot fit its learning curve")
            break
        last_points = evaluator.learning_points(d, slices, cfg.seed + len(iterations))
        curves = [fit_learning_curve(p) if len({n for n, _ in p}) >= 2
                  else LearningCurve(max(p[0][1], 1e-12), 0.0) for p in last_points]
        problem = AcquisitionProblem(tuple(sizes), tuple(curves), tuple(costs), remaining, lam)
        alloc = optimize_allocation(problem)
        target = integerize(alloc.amounts, costs, remaining)
        rec = PlanIteration("optimize", list(sizes), [(c.b, c.a) for c in curves],
                            list(alloc.amounts), list(target), [0] * k, imbalance_ratio(sizes))
        total = sum(target)
        if total == 0:
            break
        step = 0
        while sum(rec.acquired) < total:
            step += 1
            frac = min(1.0, step * cfg.batch / total)
            for i in range(k):
                want = min(target[i], int(round(target[i] * frac))) - rec.acquired[i]
                if want <= 0:
                    continue
                d, got = _acquire(d, i, want, provider, diagnostics)
                rec.acquired[i] += got
                rec.cost += got * costs[i]
                if got < want:
                    exhausted = True
                    target[i] = rec.acquired[i]
                    total = sum(target)
            now = [s + a for s, a in zip(sizes, rec.acquired)]
            rec.imbalance_end = imbalance_ratio(now)
            if abs(rec.imbalance_end - rec.imbalance_start) / rec.imbalance_start > cfg.tau:
                rec.refit_triggered = sum(rec.acquired) < total
                break
            if exhausted:
                break
        remaining -= rec.cost
        iterations.append(rec)
        if sum(rec.acquired) == 0:
            break

    final_sizes = slice_sizes(d, slices)
    return PlanTrace(iterations, final_sizes, list(evaluator.slice_losses(d, slices)),
                     float(budget - remaining), float(budget), d, diagnostics, last_points)


def execute_allocation(d: Dataset, slices: Sequence[SlicePredicate], allocation: Sequence[float],
                       budget: float, provider: Provider, evaluator: SliceEvaluator,
                       costs: Sequence[float] | None = None) -> PlanTrace:
    """Acquire a fixed allocation in one go (used to score the baselines)."""
    k = len(slices)
    c = np.ones(k) if costs is None else np.asarray(costs, dtype=float)
    target = integerize(allocation, c, budget)
    diagnostics: list[str] = []
    rec = PlanIteration("fixed", slice_sizes(d, slices), allocation=list(allocation),
                        target=list(target), acquired=[0] * k)
    for i in range(k):
        d, got = _acquire(d, i, target[i], provider, diagnostics)
        rec.acquired[i] = got
        rec.cost += got * c[i]
    return PlanTrace([rec], slice_sizes(d, slices), list(evaluator.slice_losses(d, slices)),
                     rec.cost, float(budget), d, diagnostics)
