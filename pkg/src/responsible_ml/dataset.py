"""Weighted tabular datasets, slicing, synthetic generators and fixtures.

A :class:`Dataset` is an immutable, ordered collection of :class:`Example`
records that share a schema. Every record carries a sensitive group
identifier, a binary label and a non-negative weight.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

CATEGORICAL = "categorical"
NUMERIC = "numeric"


class DataError(ValueError):
    """Raised when input data violates a contract (bad rows, unknown names)."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = NUMERIC
    values: tuple | None = None  # categorical vocabulary
    bins: tuple[float, ...] | None = None  # numeric bin edges for slicing

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, NUMERIC):
            raise DataError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.bins is not None and list(self.bins) != sorted(self.bins):
            raise DataError(f"feature {self.name!r}: bin edges must be sorted")

    @property
    def sliceable(self) -> bool:
        return self.kind == CATEGORICAL or self.bins is not None

    def slice_values(self) -> tuple:
        """Values a predicate literal may take on this feature."""
        if self.kind == CATEGORICAL:
            return tuple(self.values or ())
        if self.bins is None:
            return ()
        return tuple(range(len(self.bins) + 1))

    def bin_of(self, x: float) -> int:
        # bin i covers [edges[i-1], edges[i])
        return int(np.digitize([x], self.bins)[0])

    def bin_label(self, b: int) -> str:
        lo = "-inf" if b == 0 else f"{self.bins[b - 1]:g}"
        hi = "inf" if b == len(self.bins) else f"{self.bins[b]:g}"
        return f"[{lo},{hi})"


@dataclass(frozen=True)
class Example:
    features: Mapping[str, Any]
    sensitive: str
    label: int
    weight: float = 1.0
    uid: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if not self.weight >= 0:
            raise DataError(f"weight must be >= 0, got {self.weight!r}")


@dataclass(frozen=True)
class Dataset:
    schema: tuple[FeatureSpec, ...]
    examples: tuple[Example, ...]
    sensitive_name: str = "z"
    label_name: str = "y"
    groups: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "examples", tuple(self.examples))
        if not self.groups:
            object.__setattr__(self, "groups", tuple(sorted({e.sensitive for e in self.examples})))
        else:
            object.__setattr__(self, "groups", tuple(self.groups))
        names = [f.name for f in self.schema]
        if len(set(names)) != len(names):
            raise DataError("duplicate feature names in schema")
        known = set(self.groups)
        for i, e in enumerate(self.examples):
            if e.sensitive not in known:
                raise DataError(f"example {i}: group {e.sensitive!r} not in {self.groups}")
            missing = [n for n in names if n not in e.features]
            if missing:
                raise DataError(f"example {i}: missing features {missing}")

    def __len__(self) -> int:
        return len(self.examples)

    def spec(self, name: str) -> FeatureSpec:
        for f in self.schema:
            if f.name == name:
                return f
        raise DataError(f"unknown feature {name!r}")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.schema)

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    @cached_property
    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.examples], dtype=np.float64)

    @cached_property
    def group_index(self) -> np.ndarray:
        """Position of each example's group within ``groups``."""
        pos = {g: k for k, g in enumerate(self.groups)}
        return np.array([pos[e.sensitive] for e in self.examples], dtype=np.int64)

    @cached_property
    def uids(self) -> tuple[str, ...]:
        return tuple(e.uid for e in self.examples)

    def encode(self) -> np.ndarray:
        """Numeric design matrix; categoricals are one-hot over the vocabulary."""
        return self._encoded

    @cached_property
    def _encoded(self) -> np.ndarray:
        cols = []
        for f in self.schema:
            raw = [e.features[f.name] for e in self.examples]
            if f.kind == NUMERIC:
                cols.append(np.asarray(raw, dtype=np.float64).reshape(len(raw), 1))
            else:
                vocab = list(f.values or ())
                block = np.zeros((len(raw), len(vocab)))
                for i, v in enumerate(raw):
                    if v in vocab:
                        block[i, vocab.index(v)] = 1.0
                cols.append(block)
        if not cols:
            return np.zeros((len(self), 0))
        return np.hstack(cols)

    @property
    def input_dim(self) -> int:
        return sum(1 if f.kind == NUMERIC else len(f.values or ()) for f in self.schema)

    def slice_column(self, name: str) -> np.ndarray:
        """Per-example value a predicate literal on ``name`` is compared with."""
        cache = self.__dict__.setdefault("_slice_cols", {})
        if name not in cache:
            if name in self.feature_names:
                spec = self.spec(name)
                raw = [e.features[name] for e in self.examples]
                if spec.kind == NUMERIC:
                    if spec.bins is None:
                        raise DataError(f"numeric feature {name!r} has no bin edges")
                    col = np.digitize(np.asarray(raw, dtype=float), spec.bins)
                else:
                    col = np.empty(len(raw), dtype=object)
                    col[:] = raw
            elif name == self.sensitive_name:
                col = np.empty(len(self), dtype=object)
                col[:] = [e.sensitive for e in self.examples]
            else:
                raise DataError(f"unknown feature {name!r}")
            cache[name] = col
        return cache[name]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = [int(i) for i in indices]
        return replace(self, examples=tuple(self.examples[i] for i in idx))

    def with_labels(self, labels: Sequence[int]) -> "Dataset":
        ex = tuple(replace(e, label=int(y)) for e, y in zip(self.examples, labels, strict=True))
        return replace(self, examples=ex)

    def with_weights(self, weights: Sequence[float]) -> "Dataset":
        ex = tuple(replace(e, weight=float(w)) for e, w in zip(self.examples, weights, strict=True))
        return replace(self, examples=ex)

    def concat(self, other: Iterable[Example]) -> "Dataset":
        return replace(self, examples=self.examples + tuple(other))

    def cells(self) -> dict[tuple[int, int], np.ndarray]:
        """Indices for every (group position, label) cell."""
        out = {}
        for z in range(len(self.groups)):
            for y in (0, 1):
                out[(z, y)] = np.flatnonzero((self.group_index == z) & (self.labels == y))
        return out


# ---------------------------------------------------------------------------
# slicing


@dataclass(frozen=True, order=True)
class SlicePredicate:
    """Conjunction of ``feature == value`` literals (numeric values are bin ids)."""

    literals: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self):
        lits = tuple(sorted(((str(f), v) for f, v in self.literals), key=lambda fv: fv[0]))
        feats = [f for f, _ in lits]
        if len(set(feats)) != len(feats):
            raise DataError("at most one literal per feature")
        object.__setattr__(self, "literals", lits)

    @classmethod
    def of(cls, **literals) -> "SlicePredicate":
        return cls(tuple(literals.items()))

    def __len__(self) -> int:
        return len(self.literals)

    def __str__(self) -> str:
        if not self.literals:
            return "<all>"
        return " & ".join(f"{f}={v}" for f, v in self.literals)

    def describe(self, d: Dataset) -> str:
        parts = []
        for f, v in self.literals:
            spec = d.spec(f) if f in d.feature_names else None
            if spec is not None and spec.kind == NUMERIC:
                parts.append(f"{f} in {spec.bin_label(int(v))}")
            else:
                parts.append(f"{f}={v}")
        return " & ".join(parts) or "<all>"

    def sort_key(self) -> tuple:
        return (len(self.literals), str(self))

    def mask(self, d: Dataset) -> np.ndarray:
        m = np.ones(len(d), dtype=bool)
        for f, v in self.literals:
            m &= d.slice_column(f) == v
        return m


@dataclass(frozen=True)
class Slice:
    predicate: SlicePredicate
    members: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.members)


def apply_slice(d: Dataset, p: SlicePredicate) -> tuple[Slice, Slice]:
    """Split ``d`` into the examples satisfying ``p`` and the rest."""
    m = p.mask(d)
    return (Slice(p, tuple(np.flatnonzero(m).tolist())),
            Slice(p, tuple(np.flatnonzero(~m).tolist())))


# ---------------------------------------------------------------------------
# CSV ingestion


def schema_from_config(cfg: Mapping[str, Any]) -> dict[str, Any]:
    """Normalise a schema sidecar document into keyword arguments."""
    feats = []
    for f in cfg.get("features", []):
        bins = f.get("bins")
        values = f.get("values")
        feats.append(FeatureSpec(
            name=f["name"],
            kind=f.get("kind", NUMERIC),
            values=tuple(values) if values is not None else None,
            bins=tuple(float(b) for b in bins) if bins is not None else None,
        ))
    if "sensitive" not in cfg or "label" not in cfg:
        raise DataError("schema config needs 'sensitive' and 'label' column names")
    return {
        "schema": feats,
        "sensitive": cfg["sensitive"],
        "label": cfg["label"],
        "groups": tuple(cfg.get("groups", ())),
        "id_column": cfg.get("id"),
    }


def load_schema(path: str | Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def schema_to_config(d: Dataset, id_column: str | None = None) -> dict[str, Any]:
    feats = []
    for f in d.schema:
        entry: dict[str, Any] = {"name": f.name, "kind": f.kind}
        if f.values is not None:
            entry["values"] = list(f.values)
        if f.bins is not None:
            entry["bins"] = list(f.bins)
        feats.append(entry)
    cfg = {"features": feats, "sensitive": d.sensitive_name, "label": d.label_name,
           "groups": list(d.groups)}
    if id_column:
        cfg["id"] = id_column
    return cfg


def load_csv(path: str | Path, schema_config: Mapping[str, Any]) -> Dataset:
    """Read a UTF-8 CSV file into a :class:`Dataset`.

    The header must contain every declared feature plus the sensitive and
    label columns; ``weight`` and the optional id column may also appear.
    Categorical vocabularies missing from the config are inferred (sorted).
    """
    cfg = schema_from_config(schema_config)
    feats: list[FeatureSpec] = cfg["schema"]
    sens, lab, id_col = cfg["sensitive"], cfg["label"], cfg["id_column"]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        allowed = {f.name for f in feats} | {sens, lab, "weight"} | ({id_col} if id_col else set())
        required = {f.name for f in feats} | {sens, lab}
        missing = required - set(header)
        extra = set(header) - allowed
        if missing or extra:
            raise DataError(f"{path}: header mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})")
        rows = []
        for rowno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
            rows.append((rowno, dict(zip(header, (c.strip() for c in row)))))

    specs = {f.name: f for f in feats}
    examples = []
    for rowno, rec in rows:
        values: dict[str, Any] = {}
        for f in feats:
            raw = rec[f.name]
            if f.kind == NUMERIC:
                try:
                    x = float(raw)
                except ValueError:
                    raise DataError(f"row {rowno}: cannot parse {f.name}={raw!r} as a number") from None
                if not math.isfinite(x):
                    raise DataError(f"row {rowno}: {f.name} is not finite")
                values[f.name] = x
            else:
                values[f.name] = raw
        if rec[lab] not in ("0", "1"):
            raise DataError(f"row {rowno}: label {rec[lab]!r} is not 0 or 1")
        w = 1.0
        if "weight" in rec:
            try:
                w = float(rec["weight"])
            except ValueError:
                raise DataError(f"row {rowno}: bad weight {rec['weight']!r}") from None
            if not (w >= 0 and math.isfinite(w)):
                raise DataError(f"row {rowno}: weight must be finite and >= 0")
        uid = rec[id_col] if id_col else f"e{rowno}"
        examples.append(Example(values, rec[sens], int(rec[lab]), w, uid))

    for name, f in specs.items():
        if f.kind == CATEGORICAL and f.values is None:
            vocab = tuple(sorted({e.features[name] for e in examples}))
            specs[name] = replace(f, values=vocab)
        elif f.kind == CATEGORICAL:
            for k, e in enumerate(examples, start=1):
                if e.features[name] not in f.values:
                    raise DataError(f"row {k}: {name}={e.features[name]!r} not in vocabulary")
    groups = cfg["groups"]
    if groups:
        for k, e in enumerate(examples, start=1):
            if e.sensitive not in groups:
                raise DataError(f"row {k}: group {e.sensitive!r} not declared")
    return Dataset(tuple(specs[f.name] for f in feats), tuple(examples), sens, lab, groups)


def write_csv(d: Dataset, path: str | Path, id_column: str | None = "id") -> None:
    names = list(d.feature_names)
    header = ([id_column] if id_column else []) + names
    if d.sensitive_name not in names:
        header.append(d.sensitive_name)
    header += [d.label_name, "weight"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for e in d.examples:
            row = ([e.uid] if id_column else []) + [_fmt(e.features[n]) for n in names]
            if d.sensitive_name not in names:
                row.append(e.sensitive)
            row += [e.label, repr(float(e.weight))]
            w.writerow(row)


def _fmt(v: Any) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticParams:
    """Parameters for :func:`gen_synthetic`.

    ``means`` and ``spreads`` map ``(group, label)`` to a scalar or a vector of
    length ``n_features``.
    """

    sizes: Mapping[str, int]
    label_rates: Mapping[str, float]
    means: Mapping[tuple[str, int], Any] = field(default_factory=dict)
    spreads: Mapping[tuple[str, int], Any] = field(default_factory=dict)
    n_features: int = 2
    seed: int = 0


def gen_synthetic(params: SyntheticParams) -> Dataset:
    sizes = dict(params.sizes)
    if any(n < 0 for n in sizes.values()):
        raise DataError("group sizes must be >= 0")
    if sum(sizes.values()) == 0:
        raise DataError("at least one group must be non-empty")
    for z, r in params.label_rates.items():
        if not 0.0 <= r <= 1.0:
            raise DataError(f"label rate for {z!r} outside [0,1]")
    rng = np.random.default_rng(params.seed)
    k = params.n_features
    names = [f"x{j}" for j in range(k)]
    examples = []
    for z in sizes:  # insertion order fixes group order
        n = sizes[z]
        y = (rng.random(n) < params.label_rates.get(z, 0.5)).astype(int)
        for label in (0, 1):
            mu = np.broadcast_to(np.asarray(params.means.get((z, label), 0.0), dtype=float), (k,))
            sd = np.broadcast_to(np.asarray(params.spreads.get((z, label), 1.0), dtype=float), (k,))
            rows = np.flatnonzero(y == label)
            x = rng.normal(mu, sd, size=(len(rows), k))
            for r, xi in zip(rows, x):
                examples.append((r, z, label, xi))
        # keep within-group order by draw position
    examples.sort(key=lambda t: (list(sizes).index(t[1]), t[0]))
    out = [Example(dict(zip(names, map(float, xi))), z, label, 1.0, f"{z}:{r}")
           for r, z, label, xi in examples]
    schema = tuple(FeatureSpec(n, NUMERIC) for n in names)
    return Dataset(schema, tuple(out), "z", "y", tuple(sizes))


# ---------------------------------------------------------------------------
# poisoning


def flip_labels(d: Dataset, indices: Iterable[int]) -> Dataset:
    idx = set(int(i) for i in indices)
    return d.with_labels([1 - y if i in idx else y for i, y in enumerate(d.labels)])


def poison_label_flip(d: Dataset, rate: float, seed: int = 0,
                      strategy: str = "uniform", group: str | None = None
                      ) -> tuple[Dataset, np.ndarray]:
    """Flip ``floor(rate * len(d))`` labels chosen at random.

    With ``strategy="targeted"`` the flipped examples all come from ``group``.
    Returns the poisoned dataset and the sorted flipped indices.
    """
    if not 0.0 <= rate <= 1.0:
        raise DataError("poison rate must lie in [0,1]")
    count = math.floor(rate * len(d))
    rng = np.random.default_rng(seed)
    if strategy == "uniform":
        pool = np.arange(len(d))
    elif strategy == "targeted":
        if group not in d.groups:
            raise DataError(f"unknown target group {group!r}")
        pool = np.flatnonzero(d.group_index == d.groups.index(group))
        if count > len(pool):
            raise DataError(f"cannot flip {count} labels inside group {group!r} of size {len(pool)}")
    else:
        raise DataError(f"unknown poisoning strategy {strategy!r}")
    mask = np.sort(rng.choice(pool, size=count, replace=False))
    return flip_labels(d, mask), mask


# ---------------------------------------------------------------------------
# worked-example fixtures

# (race, label) for individuals ordered by X = 1..10
_FIG2 = [("w", 0), ("b", 0), ("w", 0), ("w", 0), ("w", 1),
         ("b", 1), ("b", 1), ("b", 1), ("w", 1), ("b", 1)]


def make_fig2_fixture() -> Dataset:
    """Ten people on a line, white/black, separable between positions 4 and 5."""
    ex = tuple(Example({"X": float(i + 1)}, z, y, 1.0, f"p{i + 1}") for i, (z, y) in enumerate(_FIG2))
    return Dataset((FeatureSpec("X", NUMERIC),), ex, "race", "y", ("w", "b"))


def make_poisoned_fig2_fixture() -> Dataset:
    """The same ten people with positions 5 and 7 relabelled negative."""
    return flip_labels(make_fig2_fixture(), [4, 6])


CLEANING_ROWS = [
    ("e1", "John", "M", 20, 1),
    ("e2", "Joe", "M", 20, 0),
    ("e3", "Joseph", "M", 20, 0),
    ("e4", "Sally", "F", 30, 1),
    ("e5", "Sally", "F", 40, 0),
    ("e6", "Sally", "F", 300, 1),
]

CLEANING_SCHEMA = {
    "features": [
        {"name": "Name", "kind": CATEGORICAL},
        {"name": "Gender", "kind": CATEGORICAL, "values": ["M", "F"]},
        {"name": "Age", "kind": NUMERIC, "bins": [30, 40]},
    ],
    "sensitive": "Gender",
    "label": "Label",
    "groups": ["M", "F"],
    "id": "ID",
}


def make_table1_fixture() -> Dataset:
    """Six people, two of them duplicates (e2/e3) and one with a poisoned age (e6)."""
    names = tuple(sorted({r[1] for r in CLEANING_ROWS}))
    schema = (FeatureSpec("Name", CATEGORICAL, names),
              FeatureSpec("Gender", CATEGORICAL, ("M", "F")),
              FeatureSpec("Age", NUMERIC, bins=(30.0, 40.0)))
    ex = tuple(Example({"Name": n, "Gender": g, "Age": float(a)}, g, y, 1.0, uid)
               for uid, n, g, a, y in CLEANING_ROWS)
    return Dataset(schema, ex, "Gender", "Label", ("M", "F"))


def table1_csv(path: str | Path) -> None:
    """Write the six-example table as CSV (no weight column)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ID", "Name", "Gender", "Age", "Label"])
        for row in CLEANING_ROWS:
            w.writerow(row)
