"""Core value types: datasets, forest parameters, step CDFs.

Everything here is immutable after construction. Arrays are copied and
marked read-only so instances can be shared between threads.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

# Probabilities produced by summing per-tree masses carry rounding noise.
PROB_EPS = 1e-10

MAX_LEVELS = 62


class DataError(ValueError):
    """Raised when tabular input violates the dataset invariants."""


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "continuous"  # "continuous" | "categorical"
    levels: int = 0

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise DataError(f"unknown column type {self.kind!r} for {self.name}")
        if self.kind == "categorical" and not 2 <= self.levels <= MAX_LEVELS:
            raise DataError(f"categorical column {self.name} needs 2..{MAX_LEVELS} levels")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates plus a response block.

    ``events`` is None for a fully observed response. When present the
    dataset describes right-censored times and ``response`` holds the
    observed time min(T, C).
    """

    covariates: np.ndarray
    response: np.ndarray
    columns: tuple[ColumnSpec, ...]
    events: np.ndarray | None = None

    def __post_init__(self):
        X = _frozen(self.covariates, np.float64)
        y = _frozen(self.response, np.float64)
        if X.ndim != 2:
            raise DataError("covariates must be a 2-d matrix")
        n, p = X.shape
        if y.shape != (n,):
            raise DataError(f"dimension mismatch: {n} covariate rows but {y.shape[0]} responses")
        if len(self.columns) != p:
            raise DataError(f"dimension mismatch: {p} covariate columns but {len(self.columns)} specs")
        if n < 2:
            raise DataError("need at least 2 rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("missing or non-finite values are not allowed")
        for j, col in enumerate(self.columns):
            if col.is_categorical:
                codes = X[:, j]
                if np.any(codes != np.round(codes)) or codes.min() < 0 or codes.max() >= col.levels:
                    raise DataError(f"unknown category code in column {col.name}")
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.events is not None:
            d = np.asarray(self.events)
            if d.shape != (n,):
                raise DataError("dimension mismatch between events and responses")
            if not np.all((d == 0) | (d == 1)):
                raise DataError("invalid event indicator (must be 0 or 1)")
            if np.any(y <= 0):
                raise DataError("nonpositive time in censored data")
            object.__setattr__(self, "events", _frozen(d, np.int8))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def censored(self) -> bool:
        return self.events is not None

    @property
    def task(self) -> str:
        return "survival" if self.censored else "regression"

    @property
    def is_categorical(self) -> np.ndarray:
        return np.array([c.is_categorical for c in self.columns], dtype=np.bool_)

    @property
    def n_levels(self) -> np.ndarray:
        return np.array([c.levels for c in self.columns], dtype=np.int64)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        ev = None if self.events is None else self.events[rows]
        return Dataset(self.covariates[rows], self.response[rows], self.columns, ev)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_events = (self.events is None and other.events is None) or (
            self.events is not None
            and other.events is not None
            and np.array_equal(self.events, other.events)
        )
        return (
            self.columns == other.columns
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.response, other.response)
            and same_events
        )

    __hash__ = None

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "columns": [schema_entry(c) for c in self.columns],
            "covariates": self.covariates.tolist(),
            "response": self.response.tolist(),
            "events": None if self.events is None else self.events.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Dataset":
        cols = tuple(_column_from_entry(e) for e in d["columns"])
        X = np.asarray(d["covariates"], dtype=np.float64).reshape(len(d["response"]), len(cols))
        return cls(X, d["response"], cols, d.get("events"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "Dataset":
        return cls.from_dict(json.loads(s))

    def schema(self) -> dict:
        return {"columns": [schema_entry(c) for c in self.columns]}

    def to_csv(self, path) -> None:
        header = [c.name for c in self.columns]
        header += ["y", "delta"] if self.censored else ["t"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(self.n):
                row = [_fmt(v, c) for v, c in zip(self.covariates[i], self.columns)]
                row.append(repr(float(self.response[i])))
                if self.censored:
                    row.append(int(self.events[i]))
                w.writerow(row)


def _fmt(v: float, col: ColumnSpec) -> str:
    return str(int(v)) if col.is_categorical else repr(float(v))


def schema_entry(c: ColumnSpec) -> dict:
    e: dict[str, Any] = {"name": c.name, "type": c.kind}
    if c.is_categorical:
        e["levels"] = c.levels
    return e


def _column_from_entry(e: Mapping[str, Any]) -> ColumnSpec:
    return ColumnSpec(e["name"], e.get("type", "continuous"), int(e.get("levels", 0)))


def continuous_columns(p: int) -> tuple[ColumnSpec, ...]:
    return tuple(ColumnSpec(f"x{j + 1}") for j in range(p))


@dataclass(frozen=True)
class ForestParams:
    """Tuning parameters theta = (mtry, nodesize) plus ensemble settings.

    nodesize means the minimum node size eligible for splitting for
    regression forests, and the minimum number of events per terminal node
    for survival forests.
    """

    mtry: int
    nodesize: int
    n_trees: int = 500
    seed: int = 0
    resample: str = "bootstrap"
    exclude_pure: bool = False

    def __post_init__(self):
        if self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.nodesize < 1:
            raise ValueError("nodesize must be >= 1")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.resample != "bootstrap":
            raise ValueError("only bootstrap resampling with replacement is supported")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    @property
    def theta(self) -> tuple[int, int]:
        return (self.mtry, self.nodesize)

    def check(self, p: int) -> None:
        if self.mtry > p:
            raise ValueError(f"mtry={self.mtry} exceeds the number of covariates p={p}")


@dataclass(frozen=True, eq=False)
class StepCDF:
    """Right-continuous step distribution function.

    ``prob[k]`` is the CDF value on [support[k], support[k+1]). For survival
    forests the final value tau_star can be < 1.
    """

    support: np.ndarray
    prob: np.ndarray

    def __post_init__(self):
        s = _frozen(self.support, np.float64)
        q = _frozen(self.prob, np.float64)
        if s.ndim != 1 or s.shape != q.shape or s.size == 0:
            raise ValueError("support and prob must be equal-length nonempty vectors")
        if np.any(np.diff(s) <= 0):
            raise ValueError("support must be strictly increasing")
        if np.any(q < -PROB_EPS) or np.any(q > 1 + PROB_EPS) or np.any(np.diff(q) < -PROB_EPS):
            raise ValueError("prob must be nondecreasing within [0, 1]")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "prob", q)

    @property
    def tau_star(self) -> float:
        return float(self.prob[-1])

    def __call__(self, t):
        k = np.searchsorted(self.support, t, side="right") - 1
        out = np.where(k >= 0, self.prob[np.maximum(k, 0)], 0.0)
        return float(out) if np.ndim(out) == 0 else out

    def __eq__(self, other):
        if not isinstance(other, StepCDF):
            return NotImplemented
        return np.array_equal(self.support, other.support) and np.array_equal(self.prob, other.prob)

    __hash__ = None


@dataclass(frozen=True)
class QuantileRequest:
    tau: float

    def __post_init__(self):
        check_tau(self.tau)


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return tau


# -- ingestion ---------------------------------------------------------------


def load_schema(path) -> tuple[ColumnSpec, ...]:
    with open(path) as fh:
        d = json.load(fh)
    entries = d["columns"] if isinstance(d, dict) else d
    return tuple(_column_from_entry(e) for e in entries)


def validate_dataset(
    rows: Iterable[Mapping[str, Any]] | Sequence[Sequence[Any]],
    schema: Sequence[ColumnSpec] | None = None,
    header: Sequence[str] | None = None,
) -> Dataset:
    """Build a Dataset from tabular records.

    ``rows`` are mappings keyed by column name, or plain sequences together
    with ``header``. Covariate columns are x1..xp unless ``schema`` names
    them; the response is ``t`` (uncensored) or ``y`` plus ``delta``.
    """
    rows = list(rows)
    if not rows:
        raise DataError("no rows")
    if not isinstance(rows[0], Mapping):
        if header is None:
            raise DataError("sequence rows need a header")
        width = len(header)
        for r in rows:
            if len(r) != width:
                raise DataError("dimension mismatch: ragged row")
        rows = [dict(zip(header, r)) for r in rows]
    keys = list(rows[0].keys())
    for r in rows:
        if list(r.keys()) != keys:
            raise DataError("dimension mismatch: rows have different columns")
    censored = "delta" in keys
    resp_cols = ("y", "delta") if censored else ("t",)
    for c in resp_cols:
        if c not in keys:
            raise DataError(f"missing response column {c!r}")
    if schema is None:
        names = [k for k in keys if k not in resp_cols]
        schema = tuple(ColumnSpec(k) for k in names)
    else:
        schema = tuple(schema)
        missing = [c.name for c in schema if c.name not in keys]
        if missing:
            raise DataError(f"dimension mismatch: schema columns {missing} absent")
    X = np.empty((len(rows), len(schema)))
    y = np.empty(len(rows))
    d = np.empty(len(rows)) if censored else None
    for i, r in enumerate(rows):
        for j, c in enumerate(schema):
            X[i, j] = _to_float(r[c.name], c.name)
        y[i] = _to_float(r[resp_cols[0]], resp_cols[0])
        if censored:
            d[i] = _to_float(r["delta"], "delta")
    if censored:
        if not np.all((d == 0) | (d == 1)):
            raise DataError("invalid event indicator (must be 0 or 1)")
        if np.any(y <= 0):
            raise DataError("nonpositive time in censored data")
    return Dataset(X, y, schema, d)


def _to_float(v, name) -> float:
    if v is None or (isinstance(v, str) and v.strip() in ("", "NA", "NaN", "nan")):
        raise DataError(f"missing value in column {name}")
    try:
        f = float(v)
    except (TypeError, ValueError):
        raise DataError(f"non-numeric value {v!r} in column {name}") from None
    if math.isnan(f):
        raise DataError(f"missing value in column {name}")
    return f


def read_csv(path, schema_path=None) -> Dataset:
    schema = load_schema(schema_path) if schema_path else None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    return validate_dataset(rows, schema, header=header)


def read_covariates_csv(path, columns: Sequence[ColumnSpec]) -> np.ndarray:
    """Covariate block of a CSV (response columns, if any, are ignored)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    X = np.empty((len(rows), len(columns)))
    for i, r in enumerate(rows):
        for j, c in enumerate(columns):
            if c.name not in r:
                raise DataError(f"dimension mismatch: column {c.name} absent")
            X[i, j] = _to_float(r[c.name], c.name)
    return X


def write_schema(path, columns: Sequence[ColumnSpec]) -> None:
    Path(path).write_text(json.dumps({"columns": [schema_entry(c) for c in columns]}, indent=2))
