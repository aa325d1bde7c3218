"""Find interpretable data slices where a model underperforms.

A slice is problematic when it has at least ``min_size`` examples, its mean
per-example loss exceeds its complement's with effect size at least
``effect_threshold``, and Welch's test rejects equality at level ``alpha``
after a Bonferroni correction over every candidate tested in the run.
Results are ranked by impact, ``size * (slice loss - overall loss)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from .dataset import DataError, Dataset, SlicePredicate
from .model import LinearModel, predict
from .stats import effect_size, welch_t_test

__all__ = [
    "CandidateSlice", "SearchConfig", "SearchResult", "SliceReport",
    "effect_size", "significance_test", "lattice_search", "decision_tree_search",
    "find_problematic", "format_table",
]


def significance_test(slice_losses, complement_losses) -> float:
    """Two-sided Welch p-value for a difference in mean loss."""
    return welch_t_test(slice_losses, complement_losses)[2]


@dataclass(frozen=True)
class SearchConfig:
    max_literals: int = 3
    min_size: int = 30
    effect_threshold: float = 0.4
    alpha: float = 0.05
    k: int = 10
    features: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.max_literals < 1 or self.min_size < 1 or self.k < 1:
            raise ValueError("max_literals, min_size and k must be >= 1")
        if not self.effect_threshold > 0:
            raise ValueError("effect threshold must be > 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class CandidateSlice:
    predicate: SlicePredicate
    size: int
    slice_loss: float
    complement_loss: float
    effect_size: float
    p_value: float
    impact: float

    def sort_key(self):
        return (-self.impact, len(self.predicate), str(self.predicate))

    def to_dict(self) -> dict:
        es = self.effect_size
        return {
            "predicate": str(self.predicate),
            "literals": [[f, v] for f, v in self.predicate.literals],
            "size": self.size,
            "slice_loss": self.slice_loss,
            "complement_loss": self.complement_loss,
            "effect_size": es if math.isfinite(es) else ("inf" if es > 0 else "-inf"),
            "p_value": self.p_value,
            "impact": self.impact,
        }


@dataclass
class SearchResult:
    slices: list[CandidateSlice]
    evaluated: list[CandidateSlice] = field(default_factory=list)

    @property
    def n_tested(self) -> int:
        return len(self.evaluated)


def _losses(d: Dataset, model, losses) -> np.ndarray:
    if losses is not None:
        out = np.asarray(losses, dtype=float)
        if len(out) != len(d):
            raise DataError("losses must align with the dataset")
        return out
    if not isinstance(model, LinearModel):
        raise TypeError("pass a LinearModel or explicit per-example losses")
    return metrics.per_example_losses(predict(model, d), d)


def _slice_features(d: Dataset, cfg: SearchConfig) -> list[tuple[str, tuple]]:
    names = cfg.features if cfg.features is not None else d.feature_names
    out = []
    for name in names:
        if name in d.feature_names:
            spec = d.spec(name)
            if spec.sliceable:
                out.append((name, spec.slice_values()))
            elif cfg.features is not None:
                raise DataError(f"feature {name!r} is numeric without bin edges")
        elif name == d.sensitive_name:
            out.append((name, d.groups))
        else:
            raise DataError(f"unknown feature {name!r}")
    if not out:
        raise DataError("no categorical or binned features to slice on")
    return out


def _evaluate(pred: SlicePredicate, mask: np.ndarray, losses: np.ndarray) -> CandidateSlice | None:
    n = int(mask.sum())
    if n < 2 or len(losses) - n < 2:
        return None
    inside, outside = losses[mask], losses[~mask]
    return CandidateSlice(
        predicate=pred,
        size=n,
        slice_loss=float(inside.mean()),
        complement_loss=float(outside.mean()),
        effect_size=effect_size(inside, outside),
        p_value=significance_test(inside, outside),
        impact=float(n * (inside.mean() - losses.mean())),
    )


def _problematic(evaluated: list[CandidateSlice], cfg: SearchConfig) -> list[CandidateSlice]:
    if not evaluated:
        return []
    level = cfg.alpha / len(evaluated)
    return [c for c in evaluated if c.effect_size >= cfg.effect_threshold and c.p_value <= level]


def lattice_search(d: Dataset, model: LinearModel | None, cfg: SearchConfig = SearchConfig(),
                   losses=None) -> list[CandidateSlice]:
    """Breadth-first walk over conjunctions of up to ``max_literals`` literals."""
    return lattice_search_full(d, model, cfg, losses).slices


def lattice_search_full(d: Dataset, model, cfg: SearchConfig = SearchConfig(), losses=None) -> SearchResult:
    loss = _losses(d, model, losses)
    feats = _slice_features(d, cfg)
    lit_masks = [[d.slice_column(f) == v for v in vals] for f, vals in feats]
    evaluated: list[CandidateSlice] = []
    # frontier entries: (index of last feature used, literals, mask)
    frontier = [(-1, (), np.ones(len(d), dtype=bool))]
    for _ in range(cfg.max_literals):
        nxt = []
        for last, lits, mask in frontier:
            for j in range(last + 1, len(feats)):
                f, vals = feats[j]
                for v, lm in zip(vals, lit_masks[j]):
                    m = mask & lm
                    if m.sum() < cfg.min_size:
                        continue  # every refinement is smaller still
                    new_lits = lits + ((f, v),)
                    cand = _evaluate(SlicePredicate(new_lits), m, loss)
                    if cand is not None:
                        evaluated.append(cand)
                    nxt.append((j, new_lits, m))
        frontier = nxt
        if not frontier:
            break
    found = sorted(_problematic(evaluated, cfg), key=CandidateSlice.sort_key)
    return SearchResult(found[:cfg.k], evaluated)


def _sse(x: np.ndarray) -> float:
    return float(((x - x.mean()) ** 2).sum()) if len(x) else 0.0


def decision_tree_search(d: Dataset, model: LinearModel | None, cfg: SearchConfig = SearchConfig(),
                         losses=None) -> list[CandidateSlice]:
    """Greedy tree on the per-example loss; returns disjoint leaf-ward slices."""
    return decision_tree_search_full(d, model, cfg, losses).slices


def decision_tree_search_full(d: Dataset, model, cfg: SearchConfig = SearchConfig(),
                              losses=None) -> SearchResult:
    loss = _losses(d, model, losses)
    feats = _slice_features(d, cfg)
    cols = {f: d.slice_column(f) for f, _ in feats}
    evaluated: list[CandidateSlice] = []
    # (literals, mask, index of parent's record in `nodes` or -1)
    nodes: list[tuple[tuple, int]] = []
    records: dict[int, CandidateSlice] = {}

    def grow(lits: tuple, mask: np.ndarray, depth: int, parent: int) -> None:
        if depth >= cfg.max_literals or mask.sum() < 2 * cfg.min_size:
            return
        used = {f for f, _ in lits}
        base = _sse(loss[mask])
        best = None
        for f, vals in feats:
            if f in used:
                continue
            children = [(v, mask & (cols[f] == v)) for v in vals]
            children = [(v, m) for v, m in children if m.any()]
            if len(children) < 2:
                continue
            gain = base - sum(_sse(loss[m]) for _, m in children)
            if best is None or gain > best[0] + 1e-12:
                best = (gain, f, children)
        if best is None or best[0] <= 1e-12:
            return
        _, f, children = best
        for v, m in children:
            if m.sum() < cfg.min_size:
                continue
            child_lits = lits + ((f, v),)
            idx = len(nodes)
            nodes.append((child_lits, parent))
            cand = _evaluate(SlicePredicate(child_lits), m, loss)
            if cand is not None:
                evaluated.append(cand)
                records[idx] = cand
            grow(child_lits, m, depth + 1, idx)

    grow((), np.ones(len(d), dtype=bool), 0, -1)
    flagged = {id(c) for c in _problematic(evaluated, cfg)}

    def has_flagged_ancestor(i: int) -> bool:
        p = nodes[i][1]
        while p != -1:
            if p in records and id(records[p]) in flagged:
                return True
            p = nodes[p][1]
        return False

    keep = [c for i, c in records.items() if id(c) in flagged and not has_flagged_ancestor(i)]
    keep.sort(key=CandidateSlice.sort_key)
    return SearchResult(keep[:cfg.k], evaluated)


@dataclass
class SliceReport:
    strategy: str
    slices: list[CandidateSlice]
    n_tested: int
    overlapping_pairs: int
    other: "SliceReport | None" = None
    shared_predicates: int = 0

    def to_dict(self) -> dict:
        out = {
            "strategy": self.strategy,
            "n_tested": self.n_tested,
            "n_problematic": len(self.slices),
            "overlapping_pairs": self.overlapping_pairs,
            "slices": [c.to_dict() for c in self.slices],
        }
        if self.other is not None:
            out["other"] = self.other.to_dict()
            out["shared_predicates"] = self.shared_predicates
        return out


def _overlaps(d: Dataset, slices: Sequence[CandidateSlice]) -> int:
    masks = [c.predicate.mask(d) for c in slices]
    return sum(1 for i in range(len(masks)) for j in range(i + 1, len(masks))
               if (masks[i] & masks[j]).any())


def find_problematic(d: Dataset, model: LinearModel | None, cfg: SearchConfig = SearchConfig(),
                     strategy: str = "lattice", losses=None) -> SliceReport:
    """Run one strategy (``tree`` or ``lattice``) or ``both`` and summarise."""
    loss = _losses(d, model, losses)
    if strategy not in ("tree", "lattice", "both"):
        raise ValueError(f"unknown strategy {strategy!r}")
    reports = {}
    for name, fn in (("lattice", lattice_search_full), ("tree", decision_tree_search_full)):
        if strategy in (name, "both"):
            res = fn(d, None, cfg, loss)
            reports[name] = SliceReport(name, res.slices, res.n_tested, _overlaps(d, res.slices))
    if strategy != "both":
        return reports[strategy]
    main, other = reports["lattice"], reports["tree"]
    main.other = other
    main.strategy = "both"
    main.shared_predicates = len({c.predicate for c in main.slices} & {c.predicate for c in other.slices})
    return main


def format_table(slices: Sequence[CandidateSlice], d: Dataset | None = None) -> str:
    head = f"{'slice':<40} {'size':>6} {'loss':>8} {'rest':>8} {'effect':>8} {'p':>10} {'impact':>9}"
    lines = [head, "-" * len(head)]
    for c in slices:
        name = c.predicate.describe(d) if d is not None else str(c.predicate)
        lines.append(f"{name:<40} {c.size:>6d} {c.slice_loss:>8.4f} {c.complement_loss:>8.4f} "
                     f"{c.effect_size:>8.3f} {c.p_value:>10.3g} {c.impact:>9.3f}")
    return "\n".join(lines)
