"""Regression and survival forests with out-of-bag bookkeeping."""

from __future__ import annotations

import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import PROB_EPS, ColumnSpec, Dataset, ForestParams, StepCDF, schema_entry, _column_from_entry
from . import _kernels as K

FORMAT_VERSION = 1


class NeverOOBError(RuntimeError):
    """A training row was in-bag for every tree; raise n_trees."""


@dataclass
class TreeNode:
    """Readable view of one node; built on demand from the flat arrays."""

    feature: int = -1
    threshold: float | None = None
    levels_left: frozenset[int] | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    rows: np.ndarray | None = None  # in-bag training rows (with multiplicity) for leaves

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())


def tree_seed(seed: int, b: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(b,)).generate_state(1, np.uint32)[0])


def theta_seed(seed: int, mtry: int, nodesize: int) -> int:
    """Fold a grid point into a base seed; equal theta gives equal forests."""
    return int(np.random.SeedSequence([seed, mtry, nodesize]).generate_state(1, np.uint64)[0])


@dataclass(eq=False)
class Forest:
    params: ForestParams
    task: str
    columns: tuple[ColumnSpec, ...]
    X: np.ndarray
    y: np.ndarray
    events: np.ndarray | None
    support: np.ndarray
    inbag: np.ndarray
    arrays: dict
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_trees(self) -> int:
        return self.inbag.shape[0]

    @property
    def is_categorical(self) -> np.ndarray:
        return np.array([c.is_categorical for c in self.columns], dtype=np.bool_)

    # -- aggregation -------------------------------------------------------

    def _aggregate(self, Xq, qrows, use_oob):
        a = self.arrays
        return K.aggregate(
            Xq, qrows, use_oob, self.inbag, self.is_categorical,
            a["node_off"], a["feat"], a["thr"], a["mask"], a["left"], a["right"], a["leaf_of"],
            a["leaf_off"], a["ent_off"], a["ent_idx"], a["ent_mass"], a["leaf_mean"],
            self.support.shape[0],
        )

    def _finish(self, mass, cnt):
        cdf = np.cumsum(mass / cnt[:, None], axis=1)
        np.clip(cdf, 0.0, 1.0, out=cdf)
        if self.task == "regression":
            cdf[:, -1] = 1.0
        return cdf

    def oob_cdf_matrix(self) -> np.ndarray:
        """n x len(support) matrix of OOB CDF values (row i = training row i)."""
        if "oob" not in self._cache:
            rows = np.arange(self.n, dtype=np.int64)
            mass, cnt, msum = self._aggregate(self.X, rows, True)
            never = np.flatnonzero(cnt == 0)
            with np.errstate(invalid="ignore", divide="ignore"):
                cdf = self._finish(mass, cnt)
                mean = msum / cnt
            cdf[never] = np.nan
            mean[never] = np.nan
            self._cache["oob"] = (cdf, mean, cnt, never)
        return self._cache["oob"][0]

    def oob_tree_counts(self) -> np.ndarray:
        self.oob_cdf_matrix()
        return self._cache["oob"][2]

    def never_oob(self) -> np.ndarray:
        """Indices of training rows that are in bag for every tree."""
        self.oob_cdf_matrix()
        return self._cache["oob"][3]

    def _check_oob(self, i=None):
        never = self.never_oob()
        if i is None:
            if never.size:
                raise NeverOOBError(
                    f"{never.size} training rows are never out of bag; increase n_trees"
                )
        elif i in set(never.tolist()):
            raise NeverOOBError(f"row {i} is never out of bag; increase n_trees")

    def oob_cdf(self, i: int) -> StepCDF:
        self._check_oob(i)
        return StepCDF(self.support, self.oob_cdf_matrix()[i])

    def predict_cdf_matrix(self, Xq) -> np.ndarray:
        Xq = self._check_x(Xq)
        mass, cnt, _ = self._aggregate(Xq, np.zeros(Xq.shape[0], np.int64), False)
        return self._finish(mass, cnt)

    def predict_cdf(self, x) -> StepCDF:
        return StepCDF(self.support, self.predict_cdf_matrix(np.atleast_2d(x))[0])

    def oob_mean_predictions(self, strict: bool = True) -> np.ndarray:
        """OOB mean per training row; with ``strict=False`` never-OOB rows are NaN."""
        if self.task != "regression":
            raise ValueError("OOB mean prediction is only defined for regression forests")
        if strict:
            self._check_oob()
        else:
            self.oob_cdf_matrix()
        return self._cache["oob"][1]

    def oob_mean_prediction(self, i: int) -> float:
        if self.task != "regression":
            raise ValueError("OOB mean prediction is only defined for regression forests")
        self._check_oob(i)
        return float(self._cache["oob"][1][i])

    def predict_mean(self, Xq) -> np.ndarray:
        if self.task != "regression":
            raise ValueError("mean prediction is only defined for regression forests")
        Xq = self._check_x(Xq)
        _, cnt, msum = self._aggregate(Xq, np.zeros(Xq.shape[0], np.int64), False)
        return msum / cnt

    def _check_x(self, Xq) -> np.ndarray:
        Xq = np.ascontiguousarray(np.atleast_2d(np.asarray(Xq, dtype=np.float64)))
        if Xq.shape[1] != self.p:
            raise ValueError(f"dimension mismatch: expected {self.p} covariates, got {Xq.shape[1]}")
        return Xq

    # -- structure ---------------------------------------------------------

    def tree(self, b: int) -> TreeNode:
        a = self.arrays
        base = a["node_off"][b]
        nb = a["node_off"][b + 1] - base
        rbase = b * self.n

        def build(v):
            f = int(a["feat"][base + v])
            if f < 0:
                s, e = a["start"][base + v], a["end"][base + v]
                return TreeNode(rows=a["samp"][rbase + s: rbase + e].copy())
            node = TreeNode(feature=f)
            if self.columns[f].is_categorical:
                m = int(a["mask"][base + v])
                node.levels_left = frozenset(k for k in range(self.columns[f].levels) if (m >> k) & 1)
            else:
                node.threshold = float(a["thr"][base + v])
            node.left = build(int(a["left"][base + v]))
            node.right = build(int(a["right"][base + v]))
            return node

        assert nb >= 1
        return build(0)

    def apply(self, Xq, b: int) -> np.ndarray:
        """Node index (local to tree b) of the leaf reached by each query row."""
        a = self.arrays
        return K.apply_tree(self._check_x(Xq), b, a["node_off"], a["feat"], a["thr"],
                            a["mask"], a["left"], a["right"], self.is_categorical)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "format": "qrftune-forest",
            "version": FORMAT_VERSION,
            "task": self.task,
            "params": {
                "mtry": self.params.mtry,
                "nodesize": self.params.nodesize,
                "n_trees": self.params.n_trees,
                "seed": str(self.params.seed),
                "exclude_pure": self.params.exclude_pure,
            },
            "columns": [schema_entry(c) for c in self.columns],
        }
        payload = {f"a_{k}": v for k, v in self.arrays.items()}
        payload.update(
            meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            X=self.X, y=self.y, support=self.support, inbag=self.inbag,
        )
        if self.events is not None:
            payload["events"] = self.events
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **payload)

    @classmethod
    def load(cls, path) -> "Forest":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("format") != "qrftune-forest" or meta.get("version") != FORMAT_VERSION:
                raise ValueError(f"unsupported forest file {path}")
            pm = meta["params"]
            params = ForestParams(pm["mtry"], pm["nodesize"], pm["n_trees"], int(pm["seed"]),
                                  exclude_pure=pm["exclude_pure"])
            arrays = {k[2:]: z[k] for k in z.files if k.startswith("a_")}
            return cls(
                params=params,
                task=meta["task"],
                columns=tuple(_column_from_entry(e) for e in meta["columns"]),
                X=z["X"], y=z["y"],
                events=z["events"] if "events" in z.files else None,
                support=z["support"], inbag=z["inbag"], arrays=arrays,
            )


def fit_forest(data: Dataset, params: ForestParams, n_jobs: int = 1) -> Forest:
    """Grow ``params.n_trees`` trees on bootstrap resamples of ``data``.

    The task follows the data: survival when event indicators are present.
    Each tree draws from its own stream seeded by (seed, tree index), so the
    result does not depend on ``n_jobs``.
    """
    params.check(data.p)
    X = np.ascontiguousarray(data.covariates)
    y = np.ascontiguousarray(data.response)
    n = data.n
    if data.censored:
        task = "survival"
        ev = data.events.astype(np.float64)
        if ev.sum() == 0:
            raise ValueError("survival forest needs at least one event")
        support = np.unique(y[ev == 1])
        yrank = np.full(n, -1, np.int64)
        yrank[ev == 1] = np.searchsorted(support, y[ev == 1])
        tr = np.searchsorted(np.unique(y), y).astype(np.int64)
        code = K.SURVIVAL
    else:
        task = "regression"
        ev = np.ones(n)
        support = np.unique(y)
        yrank = np.searchsorted(support, y).astype(np.int64)
        tr = np.zeros(n, np.int64)
        code = K.REGRESSION
    is_cat = data.is_categorical
    n_levels = data.n_levels

    def one(b):
        out = K.grow_tree(X, y, ev, tr, is_cat, n_levels, code, params.mtry, params.nodesize,
                          params.exclude_pure, tree_seed(params.seed, b))
        feat, thr, mask, left, right, start, end, samp, inbag = out
        leaf_of, ent_off, ent_idx, ent_mass, leaf_mean = K.leaf_payload(
            samp, start, end, feat, yrank, y, ev, code, support.shape[0])
        return feat, thr, mask, left, right, start, end, samp, inbag, leaf_of, ent_off, ent_idx, ent_mass, leaf_mean

    B = params.n_trees
    if n_jobs == 1:
        trees = [one(b) for b in range(B)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            trees = list(ex.map(one, range(B)))
    return _assemble(trees, params, task, data, support)


def _assemble(trees, params, task, data, support) -> Forest:
    node_counts = [t[0].shape[0] for t in trees]
    leaf_counts = [t[10].shape[0] - 1 for t in trees]
    node_off = np.concatenate([[0], np.cumsum(node_counts)]).astype(np.int64)
    leaf_off = np.concatenate([[0], np.cumsum(leaf_counts)]).astype(np.int64)
    ent_sizes = [t[11].shape[0] for t in trees]
    ent_base = np.concatenate([[0], np.cumsum(ent_sizes)])[:-1]
    ent_off = np.concatenate(
        [[0]] + [t[10][1:] + base for t, base in zip(trees, ent_base)]
    ).astype(np.int64)
    arrays = {
        "node_off": node_off,
        "feat": np.concatenate([t[0] for t in trees]),
        "thr": np.concatenate([t[1] for t in trees]),
        "mask": np.concatenate([t[2] for t in trees]),
        "left": np.concatenate([t[3] for t in trees]),
        "right": np.concatenate([t[4] for t in trees]),
        "start": np.concatenate([t[5] for t in trees]),
        "end": np.concatenate([t[6] for t in trees]),
        "samp": np.concatenate([t[7] for t in trees]),
        "leaf_of": np.concatenate([t[9] for t in trees]),
        "leaf_off": leaf_off,
        "ent_off": ent_off,
        "ent_idx": np.concatenate([t[11] for t in trees]),
        "ent_mass": np.concatenate([t[12] for t in trees]),
        "leaf_mean": np.concatenate([t[13] for t in trees]),
    }
    for v in arrays.values():
        v.setflags(write=False)
    inbag = np.stack([t[8] for t in trees])
    inbag.setflags(write=False)
    return Forest(
        params=params,
        task=task,
        columns=data.columns,
        X=data.covariates,
        y=data.response,
        events=data.events,
        support=support,
        inbag=inbag,
        arrays=arrays,
    )


def oob_cdf(forest: Forest, i: int) -> StepCDF:
    return forest.oob_cdf(i)


def predict_cdf(forest: Forest, x) -> StepCDF:
    return forest.predict_cdf(x)


def oob_mean_prediction(forest: Forest, i: int) -> float:
    return forest.oob_mean_prediction(i)
