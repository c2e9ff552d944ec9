"""Clustered observational study data.

Units belong to clusters and inherit their cluster's treatment status.
`CosDataset` keeps everything as numpy arrays with units stored contiguously
by cluster, so any per-cluster sum is a slice reduction (``np.add.reduceat``
over ``starts``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Hashable, Sequence

import numpy as np


class DatasetError(ValueError):
    """Raised when a dataset violates the clustered-design invariants."""


@dataclass(frozen=True)
class UnitRecord:
    unit_id: Hashable
    cluster_id: Hashable
    x: tuple[float, ...]
    y: float


@dataclass(frozen=True)
class ClusterRecord:
    cluster_id: Hashable
    treated: bool
    w: tuple[float, ...]
    size: int


def _object_array(values: Sequence[Hashable]) -> np.ndarray:
    # element-wise fill keeps tuple ids as scalars instead of extra dimensions
    out = np.empty(len(values), dtype=object)
    for i, v in enumerate(values):
        out[i] = v
    return out


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class CosDataset:
    """Immutable clustered dataset with cluster-level treatment.

    Parameters
    ----------
    unit_ids, unit_cluster_ids : sequences of length n
        Opaque identifiers; ``unit_cluster_ids`` must refer to ``cluster_ids``.
    X : array [n x p]
        Unit-level covariates.
    y : array [n]
        Outcomes.
    cluster_ids : sequence of length m
    treated : bool array [m]
    W : array [m x q]
        Cluster-level covariates.
    x_names, w_names : optional covariate names.

    Units are reordered (stably) so members of each cluster are contiguous and
    clusters appear in the order given by ``cluster_ids``.
    """

    def __init__(
        self,
        unit_ids: Sequence[Hashable],
        unit_cluster_ids: Sequence[Hashable],
        X,
        y,
        cluster_ids: Sequence[Hashable],
        treated,
        W,
        x_names: Sequence[str] | None = None,
        w_names: Sequence[str] | None = None,
    ):
        unit_ids = list(unit_ids)
        unit_cluster_ids = list(unit_cluster_ids)
        cluster_ids = list(cluster_ids)
        n = len(unit_ids)
        m = len(cluster_ids)
        if n == 0 or m == 0:
            raise DatasetError("dataset has no units or no clusters")
        if len(unit_cluster_ids) != n:
            raise DatasetError("unit_cluster_ids must have one entry per unit")

        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(n, -1) if X.size else np.zeros((n, 0))
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W.reshape(m, -1) if W.size else np.zeros((m, 0))
        y = np.asarray(y, dtype=float).reshape(-1)
        treated = np.asarray(treated).astype(bool).reshape(-1)
        if X.shape[0] != n or y.shape[0] != n:
            raise DatasetError("X and y must have one row per unit")
        if W.shape[0] != m or treated.shape[0] != m:
            raise DatasetError("W and treated must have one row per cluster")
        if not np.all(np.isfinite(y)):
            raise DatasetError("outcomes must be finite")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(W))):
            raise DatasetError("covariates must be finite")
        if len(set(cluster_ids)) != m:
            raise DatasetError("duplicate cluster ids")
        if len(set(unit_ids)) != n:
            raise DatasetError("duplicate unit ids")

        position = {cid: k for k, cid in enumerate(cluster_ids)}
        try:
            cluster = np.array([position[c] for c in unit_cluster_ids], dtype=np.int64)
        except KeyError as exc:
            raise DatasetError(f"unit refers to unknown cluster {exc.args[0]!r}") from None
        sizes = np.bincount(cluster, minlength=m)
        if np.any(sizes == 0):
            empty = [cluster_ids[k] for k in np.flatnonzero(sizes == 0)]
            raise DatasetError(f"clusters without units: {empty}")
        if not treated.any():
            raise DatasetError("no treated clusters")
        if treated.all():
            raise DatasetError("no control clusters")

        order = np.argsort(cluster, kind="stable")
        self.unit_ids = _frozen(_object_array(unit_ids)[order])
        self.cluster = _frozen(cluster[order])
        self.X = _frozen(X[order])
        self.y = _frozen(y[order])
        self.cluster_ids = _frozen(_object_array(cluster_ids))
        self.treated = _frozen(treated)
        self.W = _frozen(W)
        self.sizes = _frozen(sizes)
        self.starts = _frozen(np.concatenate([[0], np.cumsum(sizes)]))
        self.unit_treated = _frozen(treated[self.cluster])
        self.x_names = tuple(x_names) if x_names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
        self.w_names = tuple(w_names) if w_names is not None else tuple(f"w{j}" for j in range(W.shape[1]))
        if len(self.x_names) != X.shape[1] or len(self.w_names) != W.shape[1]:
            raise DatasetError("covariate names do not match covariate dimensions")

    # -- sizes -------------------------------------------------------------

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def m(self) -> int:
        return int(self.sizes.shape[0])

    @property
    def n1(self) -> int:
        """Units in treated clusters."""
        return int(self.sizes[self.treated].sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def units(self) -> list[UnitRecord]:
        cids = self.cluster_ids[self.cluster]
        return [
            UnitRecord(uid, cid, tuple(float(v) for v in x), float(yy))
            for uid, cid, x, yy in zip(self.unit_ids, cids, self.X, self.y)
        ]

    @property
    def clusters(self) -> list[ClusterRecord]:
        return [
            ClusterRecord(cid, bool(a), tuple(float(v) for v in w), int(s))
            for cid, a, w, s in zip(self.cluster_ids, self.treated, self.W, self.sizes)
        ]

    @property
    def unit_W(self) -> np.ndarray:
        """Cluster covariates evaluated per unit, [n x q]."""
        return self.W[self.cluster]

    def cluster_sums(self, values: np.ndarray) -> np.ndarray:
        """Sum ``values`` (length n, or [n x k]) within each cluster."""
        return np.add.reduceat(np.asarray(values, dtype=float), self.starts[:-1], axis=0)

    # -- derived datasets --------------------------------------------------

    def with_outcome(self, y) -> CosDataset:
        """Copy with outcomes replaced (``y`` in this dataset's unit order)."""
        return CosDataset(
            self.unit_ids, self.cluster_ids[self.cluster], self.X, y,
            self.cluster_ids, self.treated, self.W, self.x_names, self.w_names,
        )

    def with_treatment(self, treated) -> CosDataset:
        return CosDataset(
            self.unit_ids, self.cluster_ids[self.cluster], self.X, self.y,
            self.cluster_ids, treated, self.W, self.x_names, self.w_names,
        )

    def select_clusters(self, indices: Sequence[int]) -> CosDataset:
        """Dataset made of the given cluster positions.

        If any position repeats (sampling with replacement), every cluster id
        becomes ``(original_id, k)`` for the k-th copy, and unit ids likewise.
        """
        indices = [int(k) for k in indices]
        relabel = len(set(indices)) != len(indices)
        seen: dict[int, int] = {}
        unit_ids, unit_cids, new_cids, rows = [], [], [], []
        for k in indices:
            copy = seen.get(k, 0)
            seen[k] = copy + 1
            cid = (self.cluster_ids[k], copy) if relabel else self.cluster_ids[k]
            new_cids.append(cid)
            members = self.unit_ids[self.starts[k]:self.starts[k + 1]]
            unit_ids.extend((u, copy) if relabel else u for u in members)
            unit_cids.extend([cid] * len(members))
            rows.append(np.arange(self.starts[k], self.starts[k + 1]))
        rows = np.concatenate(rows)
        return CosDataset(
            unit_ids, unit_cids, self.X[rows], self.y[rows], new_cids,
            self.treated[indices], self.W[indices], self.x_names, self.w_names,
        )

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "x_names": list(self.x_names),
            "w_names": list(self.w_names),
            "clusters": [
                {"cluster_id": _jsonable(c.cluster_id), "treated": c.treated, "w": list(c.w)}
                for c in self.clusters
            ],
            "units": [
                {"unit_id": _jsonable(u.unit_id), "cluster_id": _jsonable(u.cluster_id),
                 "x": list(u.x), "y": u.y}
                for u in self.units
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CosDataset:
        units, clusters = d["units"], d["clusters"]
        q = len(d["w_names"])
        p = len(d["x_names"])
        return cls(
            [_hashable(u["unit_id"]) for u in units],
            [_hashable(u["cluster_id"]) for u in units],
            np.array([u["x"] for u in units], dtype=float).reshape(len(units), p),
            [u["y"] for u in units],
            [_hashable(c["cluster_id"]) for c in clusters],
            [c["treated"] for c in clusters],
            np.array([c["w"] for c in clusters], dtype=float).reshape(len(clusters), q),
            d["x_names"], d["w_names"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> CosDataset:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __repr__(self) -> str:
        n, m, n1, n0 = counts(self)
        return f"CosDataset(n={n}, m={m}, n1={n1}, n0={n0}, p={self.X.shape[1]}, q={self.W.shape[1]})"


def _jsonable(v):
    if isinstance(v, tuple):
        return {"tuple": [_jsonable(e) for e in v]}
    if isinstance(v, np.generic):
        return v.item()
    return v


def _hashable(v):
    if isinstance(v, dict) and "tuple" in v:
        return tuple(_hashable(e) for e in v["tuple"])
    return v


def cluster_index(dataset: CosDataset) -> dict[Hashable, tuple[int, int]]:
    """Map each cluster id to its inclusive ``(first, last)`` unit positions."""
    return {
        cid: (int(dataset.starts[k]), int(dataset.starts[k + 1]) - 1)
        for k, cid in enumerate(dataset.cluster_ids)
    }


def counts(dataset: CosDataset) -> tuple[int, int, int, int]:
    """Return ``(n, m, n1, n0)``."""
    return dataset.n, dataset.m, dataset.n1, dataset.n0
