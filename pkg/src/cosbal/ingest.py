"""Assemble a CosDataset from CSV files described by a schema config."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .data import CosDataset

AGGREGATORS = ("mean", "proportion")
_TRUE = {"1", "1.0", "true", "t", "yes", "y"}
_FALSE = {"0", "0.0", "false", "f", "no", "n"}


class IngestError(ValueError):
    pass


class MissingColumn(IngestError):
    pass


class NonConstantTreatmentWithinCluster(IngestError):
    pass


class UnparseableValue(IngestError):
    pass


class MissingValue(IngestError):
    pass


@dataclass(frozen=True)
class SchemaConfig:
    """Where the data lives and which columns play which role.

    The treatment column is read from the unit file when present there
    (and must then be constant within each cluster), otherwise from the
    cluster file. ``aggregate_unit_covariates`` lists ``(column, aggregator)``
    pairs turned into cluster covariates named ``<column>_<aggregator>``.
    Categorical columns are one-hot expanded into ``<column>=<level>``
    indicators, one per observed level in sorted order.
    """

    unit_file: Path
    unit_id_column: str
    cluster_id_column: str
    treatment_column: str
    outcome_column: str
    unit_covariates: tuple[str, ...] = ()
    cluster_covariates: tuple[str, ...] = ()
    aggregate_unit_covariates: tuple[tuple[str, str], ...] = ()
    categorical_unit_covariates: tuple[str, ...] = ()
    categorical_cluster_covariates: tuple[str, ...] = ()
    cluster_file: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "unit_file", Path(self.unit_file))
        if self.cluster_file is not None:
            object.__setattr__(self, "cluster_file", Path(self.cluster_file))
        object.__setattr__(self, "unit_covariates", tuple(self.unit_covariates))
        object.__setattr__(self, "cluster_covariates", tuple(self.cluster_covariates))
        object.__setattr__(self, "categorical_unit_covariates", tuple(self.categorical_unit_covariates))
        object.__setattr__(self, "categorical_cluster_covariates", tuple(self.categorical_cluster_covariates))
        aggs = tuple((str(c), str(a)) for c, a in self.aggregate_unit_covariates)
        object.__setattr__(self, "aggregate_unit_covariates", aggs)
        for col, agg in aggs:
            if agg not in AGGREGATORS:
                raise IngestError(f"unknown aggregator {agg!r} for column {col!r}; use one of {AGGREGATORS}")
        named = [self.unit_id_column, self.cluster_id_column, self.treatment_column, self.outcome_column,
                 *self.unit_covariates, *self.cluster_covariates, *(f"{c}_{a}" for c, a in aggs),
                 *self.categorical_unit_covariates, *self.categorical_cluster_covariates]
        dup = sorted({c for c in named if named.count(c) > 1})
        if dup:
            raise IngestError(f"columns listed more than once: {dup}")
        if len({c for c, _ in aggs}) != len(aggs):
            raise IngestError("a column may be aggregated only once")
        if (self.cluster_covariates or self.categorical_cluster_covariates) and self.cluster_file is None:
            raise IngestError("cluster covariates need a cluster_file")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | str | None = None) -> SchemaConfig:
        d = dict(d)
        ids = d.pop("id_columns", None)
        if ids is not None:
            d.setdefault("unit_id_column", ids["unit_id"])
            d.setdefault("cluster_id_column", ids["cluster_id"])
        aggs = d.pop("aggregate_unit_covariates", ()) or ()
        d["aggregate_unit_covariates"] = tuple(
            (a["column"], a["aggregator"]) if isinstance(a, dict) else tuple(a) for a in aggs
        )
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise IngestError(f"unknown schema keys: {extra}")
        base = Path(base_dir) if base_dir is not None else None
        for key in ("unit_file", "cluster_file"):
            if d.get(key) is not None and base is not None and not Path(d[key]).is_absolute():
                d[key] = base / d[key]
        try:
            return cls(**d)
        except TypeError as exc:
            raise IngestError(f"incomplete schema: {exc}") from None


def _read_csv(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise IngestError(f"file not found: {path}")
    return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")


def _require(df: pd.DataFrame, cols, path: Path) -> None:
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise MissingColumn(f"{path.name}: missing column(s) {missing}")


def _numeric(df: pd.DataFrame, col: str, path: Path) -> np.ndarray:
    raw = df[col].str.strip()
    empty = raw.eq("") | raw.str.upper().isin(["NA", "NAN"])
    if empty.any():
        row = int(np.flatnonzero(empty)[0])
        raise MissingValue(f"{path.name}: missing value in column {col!r} at row {row + 2}")
    vals = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(vals)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise UnparseableValue(f"{path.name}: cannot parse {df[col].iloc[row]!r} in column {col!r} "
                               f"at row {row + 2} as a finite number")
    return vals


def _binary(df: pd.DataFrame, col: str, path: Path) -> np.ndarray:
    raw = df[col].str.strip().str.lower()
    empty = raw.eq("")
    if empty.any():
        row = int(np.flatnonzero(empty)[0])
        raise MissingValue(f"{path.name}: missing value in column {col!r} at row {row + 2}")
    ok = raw.isin(_TRUE | _FALSE)
    if not ok.all():
        row = int(np.flatnonzero(~ok)[0])
        raise UnparseableValue(f"{path.name}: {df[col].iloc[row]!r} in column {col!r} at row {row + 2} "
                               "is not a 0/1 indicator")
    return raw.isin(_TRUE).to_numpy()


def _one_hot(df: pd.DataFrame, col: str, path: Path) -> tuple[np.ndarray, list[str]]:
    raw = df[col].str.strip()
    empty = raw.eq("")
    if empty.any():
        row = int(np.flatnonzero(empty)[0])
        raise MissingValue(f"{path.name}: missing value in column {col!r} at row {row + 2}")
    levels = sorted(set(raw))
    return (raw.to_numpy()[:, None] == np.array(levels)[None, :]).astype(float), [f"{col}={v}" for v in levels]


def _ids(df: pd.DataFrame, col: str, path: Path) -> np.ndarray:
    ids = df[col].str.strip()
    empty = ids.eq("")
    if empty.any():
        row = int(np.flatnonzero(empty)[0])
        raise MissingValue(f"{path.name}: missing id in column {col!r} at row {row + 2}")
    return ids.to_numpy(dtype=object)


def load_dataset(schema: SchemaConfig) -> CosDataset:
    """Read the files named in ``schema`` and build a validated dataset."""
    upath = schema.unit_file
    units = _read_csv(upath)
    treat_in_units = schema.treatment_column in units.columns
    agg_cols = [c for c, _ in schema.aggregate_unit_covariates]
    _require(units, [schema.unit_id_column, schema.cluster_id_column, schema.outcome_column,
                     *schema.unit_covariates, *agg_cols, *schema.categorical_unit_covariates], upath)

    uid = _ids(units, schema.unit_id_column, upath)
    ucl = _ids(units, schema.cluster_id_column, upath)
    y = _numeric(units, schema.outcome_column, upath)
    X_cols = [_numeric(units, c, upath)[:, None] for c in schema.unit_covariates]
    x_names = list(schema.unit_covariates)
    for col in schema.categorical_unit_covariates:
        block, names = _one_hot(units, col, upath)
        X_cols.append(block)
        x_names += names
    X = np.hstack(X_cols) if X_cols else np.zeros((len(units), 0))

    # sorted ids keep every aggregate independent of file row order
    cluster_ids = np.array(sorted(set(ucl)), dtype=object)
    code = {c: i for i, c in enumerate(cluster_ids)}
    cl = np.array([code[c] for c in ucl], dtype=int)
    m = len(cluster_ids)
    sizes = np.bincount(cl, minlength=m)

    treated = None
    if treat_in_units:
        z = _binary(units, schema.treatment_column, upath)
        lo = np.full(m, True)
        hi = np.full(m, False)
        np.logical_and.at(lo, cl, z)
        np.logical_or.at(hi, cl, z)
        mixed = np.flatnonzero(lo != hi)
        if mixed.size:
            bad = cluster_ids[mixed[0]]
            row = int(np.flatnonzero(ucl == bad)[0])
            raise NonConstantTreatmentWithinCluster(
                f"{upath.name}: treatment varies within cluster {bad!r} (first row {row + 2})")
        treated = hi

    W_cols, w_names = [], []
    for col, agg in schema.aggregate_unit_covariates:
        v = _numeric(units, col, upath)
        if agg == "proportion" and not np.isin(v, (0.0, 1.0)).all():
            row = int(np.flatnonzero(~np.isin(v, (0.0, 1.0)))[0])
            raise UnparseableValue(f"{upath.name}: proportion aggregate needs 0/1 values; "
                                   f"column {col!r} row {row + 2} has {units[col].iloc[row]!r}")
        W_cols.append(np.bincount(cl, weights=v, minlength=m) / sizes)
        w_names.append(f"{col}_{agg}")

    if schema.cluster_file is not None:
        cpath = schema.cluster_file
        clusters = _read_csv(cpath)
        need = [schema.cluster_id_column, *schema.cluster_covariates, *schema.categorical_cluster_covariates]
        if not treat_in_units:
            need.append(schema.treatment_column)
        _require(clusters, need, cpath)
        cid = _ids(clusters, schema.cluster_id_column, cpath)
        if len(set(cid)) != len(cid):
            raise IngestError(f"{cpath.name}: duplicate cluster ids")
        unknown = sorted(set(ucl) - set(cid))
        if unknown:
            raise IngestError(f"{upath.name}: cluster ids {unknown[:5]} not found in {cpath.name}")
        pos = {c: i for i, c in enumerate(cid)}
        order = np.array([pos[c] for c in cluster_ids])
        for col in schema.cluster_covariates:
            W_cols.append(_numeric(clusters, col, cpath)[order])
            w_names.append(col)
        for col in schema.categorical_cluster_covariates:
            block, names = _one_hot(clusters.iloc[order].reset_index(drop=True), col, cpath)
            W_cols += list(block.T)
            w_names += names
        if not treat_in_units:
            treated = _binary(clusters, schema.treatment_column, cpath)[order]
    if treated is None:
        raise MissingColumn(f"treatment column {schema.treatment_column!r} is in neither input file")

    W = np.column_stack(W_cols) if W_cols else np.zeros((m, 0))
    return CosDataset(uid, ucl, X, y, cluster_ids, treated, W,
                      x_names=x_names, w_names=w_names)
