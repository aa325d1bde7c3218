"""Unified cleaning: sanitize and deduplicate inside clusters, then reweigh for parity.

The order is fixed. Examples are first grouped into clusters (blocking),
anomalous examples are dropped within each cluster, matching duplicates are
merged into one example carrying their summed weight, and finally the
example weights are rescaled per (group, label) cell so that the weighted
positive rate is the same in every group.
"""

from __future__ import annotations

import json
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np

from . import metrics
from .dataset import NUMERIC, DataError, Dataset, Example


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def name_distance(a: str, b: str) -> float:
    """Edit distance divided by the longer length (0 identical, 1 disjoint)."""
    if not a and not b:
        return 0.0
    return edit_distance(a.lower(), b.lower()) / max(len(a), len(b))


@dataclass(frozen=True)
class CleanConfig:
    """Knobs for the cleaning stage.

    Clustering is either ``"blocking"`` (exact match on ``block_on`` plus the
    first letter of the name) or ``"single_link"`` over ``cluster_features``
    with distance threshold ``cluster_threshold``. Anomalies are values outside
    ``valid_ranges`` or, when ``robust_z`` is set, numeric values whose
    median/MAD score within the cluster exceeds it.
    """

    name_field: str | None = "Name"
    clustering: str = "blocking"
    block_on: tuple[str, ...] = ("Gender",)
    name_initial: bool = True
    cluster_features: tuple[str, ...] = ()
    cluster_threshold: float = 0.5
    valid_ranges: Mapping[str, tuple[float, float]] = field(default_factory=lambda: {"Age": (0.0, 130.0)})
    robust_z: float | None = None
    match_fields: tuple[str, ...] = ("Gender", "Age")
    name_threshold: float = 0.5
    reweigh_target: str = "max"

    def __post_init__(self):
        if self.clustering not in ("blocking", "single_link"):
            raise ValueError(f"unknown clustering {self.clustering!r}")
        if not 0.0 <= self.name_threshold <= 1.0:
            raise ValueError("name_threshold must lie in [0, 1]")
        if self.cluster_threshold < 0:
            raise ValueError("cluster_threshold must be >= 0")
        if self.robust_z is not None and not self.robust_z > 0:
            raise ValueError("robust_z must be > 0")
        if self.reweigh_target not in ("max", "prior"):
            raise ValueError("reweigh_target must be 'max' or 'prior'")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "CleanConfig":
        doc = dict(doc)
        for key in ("block_on", "cluster_features", "match_fields"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "valid_ranges" in doc:
            doc["valid_ranges"] = {k: tuple(v) for k, v in doc["valid_ranges"].items()}
        return cls(**doc)


@dataclass
class CleaningReport:
    clusters: list[list[str]] = field(default_factory=list)
    dropped: list[dict] = field(default_factory=list)
    merges: list[dict] = field(default_factory=list)
    blocked_merges: list[dict] = field(default_factory=list)
    reweigh_factors: dict[str, float] = field(default_factory=dict)
    rates_before: dict[str, float] = field(default_factory=dict)
    rates_after: dict[str, float] = field(default_factory=dict)
    previous_model: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def trace(self) -> list[str]:
        """Human-readable account of every step, in order."""
        lines = [f"clusters: {' '.join('{' + ', '.join(c) + '}' for c in self.clusters)}"]
        for dr in self.dropped:
            lines.append(f"dropped {dr['id']}: {dr['reason']}")
        for m in self.merges:
            lines.append(f"merged {' + '.join(m['inputs'])} -> {m['id']} (weight {m['weight']:g})")
        for b in self.blocked_merges:
            lines.append(f"not merged {' / '.join(b['inputs'])}: {b['reason']}")
        for cell, f in self.reweigh_factors.items():
            if f != 1.0:
                lines.append(f"reweigh {cell}: x{f:g}")
        lines.append("weighted positive rates: " + ", ".join(f"{g}={r:g}" for g, r in self.rates_after.items()))
        return lines


def _value(d: Dataset, e: Example, name: str):
    if name in e.features:
        return e.features[name]
    if name == d.sensitive_name:
        return e.sensitive
    if name == d.label_name:
        return e.label
    raise DataError(f"unknown field {name!r}")


def _cluster(d: Dataset, cfg: CleanConfig) -> list[list[int]]:
    if cfg.clustering == "blocking":
        blocks: dict[tuple, list[int]] = {}
        for i, e in enumerate(d.examples):
            key = tuple(_value(d, e, f) for f in cfg.block_on)
            if cfg.name_initial and cfg.name_field:
                key += (str(_value(d, e, cfg.name_field))[:1].lower(),)
            blocks.setdefault(key, []).append(i)
        return list(blocks.values())

    # single link: categorical mismatch count plus range-normalised numeric distance
    feats = cfg.cluster_features or d.feature_names
    numeric = [f for f in feats if f in d.feature_names and d.spec(f).kind == NUMERIC]
    spans = {}
    for f in numeric:
        col = np.array([e.features[f] for e in d.examples], dtype=float)
        spans[f] = (np.ptp(col) or 1.0) if len(col) else 1.0
    parent = list(range(len(d)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(d)):
        for j in range(i + 1, len(d)):
            dist = 0.0
            for f in feats:
                a, b = _value(d, d.examples[i], f), _value(d, d.examples[j], f)
                dist += abs(a - b) / spans[f] if f in spans else float(a != b)
            if dist <= cfg.cluster_threshold:
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(len(d)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def _anomaly_reason(d: Dataset, cluster: list[int], i: int, cfg: CleanConfig) -> str | None:
    e = d.examples[i]
    for f, (lo, hi) in cfg.valid_ranges.items():
        if f in e.features and not lo <= e.features[f] <= hi:
            return f"{f}={e.features[f]:g} outside [{lo:g}, {hi:g}]"
    if cfg.robust_z is not None and len(cluster) >= 3:
        for spec in d.schema:
            if spec.kind != NUMERIC:
                continue
            col = [d.examples[j].features[spec.name] for j in cluster]
            med = statistics.median(col)
            mad = statistics.median(abs(v - med) for v in col)
            if mad > 0 and abs(e.features[spec.name] - med) / (1.4826 * mad) > cfg.robust_z:
                return f"{spec.name}={e.features[spec.name]:g} robust z above {cfg.robust_z:g}"
    return None


def _matches(d: Dataset, a: Example, b: Example, cfg: CleanConfig) -> bool:
    if any(_value(d, a, f) != _value(d, b, f) for f in cfg.match_fields):
        return False
    if cfg.name_field is None:
        return True
    return name_distance(str(a.features[cfg.name_field]), str(b.features[cfg.name_field])) <= cfg.name_threshold


def _mode(values, weights):
    tally: Counter = Counter()
    for v, w in zip(values, weights):
        tally[v] += w
    top = max(tally.values())
    return min((v for v, c in tally.items() if c == top), key=str)


def _merge(d: Dataset, members: list[Example], cfg: CleanConfig) -> Example:
    w = [e.weight for e in members]
    total = sum(w)
    feats: dict[str, Any] = {}
    for spec in d.schema:
        vals = [e.features[spec.name] for e in members]
        if spec.name == cfg.name_field:
            feats[spec.name] = min(vals, key=str)
        elif spec.kind == NUMERIC:
            feats[spec.name] = float(np.average(vals, weights=w)) if total > 0 else float(np.mean(vals))
        else:
            feats[spec.name] = _mode(vals, w)
    return Example(feats, _mode([e.sensitive for e in members], w), members[0].label,
                   total, "+".join(e.uid for e in members))


def sanitize_and_clean(d: Dataset, cfg: CleanConfig = CleanConfig(), previous_model=None
                       ) -> tuple[Dataset, CleaningReport]:
    """Cluster, drop anomalies and merge duplicates inside each cluster.

    Matching never crosses clusters. Pairs that match but disagree on the
    label are left unmerged and listed in ``blocked_merges``.
    """
    for f in tuple(cfg.block_on) + tuple(cfg.match_fields) + tuple(cfg.cluster_features):
        if f not in d.feature_names and f not in (d.sensitive_name, d.label_name):
            raise DataError(f"clean config refers to unknown field {f!r}")
    if cfg.name_field is not None and len(d) and cfg.name_field not in d.feature_names:
        raise DataError(f"name field {cfg.name_field!r} is not a feature")
    report = CleaningReport(previous_model=None if previous_model is None else type(previous_model).__name__)
    out: list[tuple[int, Example]] = []
    for cluster in _cluster(d, cfg):
        kept = []
        for i in cluster:
            reason = _anomaly_reason(d, cluster, i, cfg)
            if reason:
                report.dropped.append({"id": d.examples[i].uid, "reason": reason})
            else:
                kept.append(i)
        if not kept:
            continue
        report.clusters.append([d.examples[i].uid for i in kept])
        parent = {i: i for i in kept}

        def find(i):
            while parent[i] != i:
                i = parent[i]
            return i

        for x, i in enumerate(kept):
            for j in kept[x + 1:]:
                a, b = d.examples[i], d.examples[j]
                if not _matches(d, a, b, cfg):
                    continue
                if a.label != b.label:
                    report.blocked_merges.append({"inputs": [a.uid, b.uid], "reason": "conflicting labels"})
                    continue
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
        comps: dict[int, list[int]] = defaultdict(list)
        for i in kept:
            comps[find(i)].append(i)
        for root, idx in comps.items():
            if len(idx) == 1:
                out.append((root, d.examples[root]))
                continue
            merged = _merge(d, [d.examples[i] for i in idx], cfg)
            report.merges.append({"inputs": [d.examples[i].uid for i in idx],
                                  "id": merged.uid, "weight": merged.weight})
            out.append((root, merged))
    out.sort(key=lambda t: t[0])
    return replace(d, examples=tuple(e for _, e in out)), report


def _group_rates(d: Dataset) -> dict[str, float]:
    rates = {}
    for g in d.groups:
        members = d.group_index == d.groups.index(g)
        if d.weights[members].sum() > 0:
            rates[g] = metrics.weighted_positive_rate(d, g)
    return rates


def reweigh_for_dp(d: Dataset, target: str = "max") -> tuple[Dataset, dict[tuple[str, int], float]]:
    """Rescale weights per (group, label) cell so weighted positive rates agree.

    ``target="max"`` lifts every group to the highest group rate by
    shrinking the weight of its negative examples only, so no weight ever
    grows. ``target="prior"`` uses the classic factor
    ``W(z) W(y) / (W W(z, y))``, which moves every group to the overall
    weighted positive rate.
    """
    if len(d.groups) != 2:
        raise DataError("reweighing needs exactly two groups")
    w, y, z = d.weights, d.labels, d.group_index
    W = {(g, lab): float(w[(z == g) & (y == lab)].sum()) for g in range(2) for lab in (0, 1)}
    Wz = {g: W[(g, 0)] + W[(g, 1)] for g in range(2)}
    for g in range(2):
        if Wz[g] <= 0:
            raise DataError(f"group {d.groups[g]!r} has no positive weight")
    labels_present = {lab for lab in (0, 1) if W[(0, lab)] + W[(1, lab)] > 0}
    for key, val in W.items():
        if val <= 0 and len(labels_present) == 2:
            raise DataError(f"empty cell (group={d.groups[key[0]]!r}, label={key[1]}) blocks reweighing")

    factors = {k: 1.0 for k in W}
    if len(labels_present) == 2:
        if target == "prior":
            total = sum(W.values())
            Wy = {lab: W[(0, lab)] + W[(1, lab)] for lab in (0, 1)}
            for (g, lab), val in W.items():
                factors[(g, lab)] = Wz[g] * Wy[lab] / (total * val)
        else:
            rate = {g: W[(g, 1)] / Wz[g] for g in range(2)}
            top = max(rate.values())
            for g in range(2):
                if rate[g] < top:
                    # solve W1 / (W1 + f W0) = top for f
                    factors[(g, 0)] = W[(g, 1)] * (1.0 - top) / (top * W[(g, 0)])
    new_w = np.array([w[i] * factors[(int(z[i]), int(y[i]))] for i in range(len(d))])
    named = {(d.groups[g], lab): f for (g, lab), f in factors.items()}
    return d.with_weights(new_w), named


def mlclean_pipeline(d: Dataset, cfg: CleanConfig = CleanConfig(), previous_model=None
                     ) -> tuple[Dataset, CleaningReport]:
    """Sanitize+clean, then reweigh. The order cannot be changed."""
    cleaned, report = sanitize_and_clean(d, cfg, previous_model)
    report.rates_before = _group_rates(cleaned)
    if len(cleaned) == 0:
        return cleaned, report
    out, factors = reweigh_for_dp(cleaned, cfg.reweigh_target)
    report.reweigh_factors = {f"{g},y={lab}": f for (g, lab), f in factors.items()}
    report.rates_after = _group_rates(out)
    return out, report
