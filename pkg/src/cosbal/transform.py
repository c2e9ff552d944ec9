"""Feature maps for the balance objective.

Builds psi(w, x) (cluster and unit covariates, optional cross-level
interactions) or phi(w) (cluster covariates only) for every unit, plus the
treated-side target moments the control weights are asked to match. No
intercept column is produced: the weight sum constraint plays that role.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import CosDataset


class FeatureSpecError(ValueError):
    pass


class UnknownCovariate(FeatureSpecError):
    pass


class DimensionMismatch(ValueError):
    pass


class ZeroVarianceFeature(UserWarning):
    """A constant feature column was dropped."""


@dataclass(frozen=True)
class FeatureSpec:
    include_unit: bool = True
    standardize: bool = True
    interactions: tuple[tuple[str, str], ...] = ()
    polynomial_degree: int = 1
    # None means every covariate in the dataset
    unit_covariates: tuple[str, ...] | None = None
    cluster_covariates: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.polynomial_degree not in (1, 2):
            raise FeatureSpecError("polynomial_degree must be 1 or 2")
        if not self.include_unit and self.interactions:
            raise FeatureSpecError("interactions require include_unit=true")
        object.__setattr__(self, "interactions", tuple(tuple(p) for p in self.interactions))


@dataclass
class DesignMatrices:
    """Transformed covariates for every unit, in dataset order.

    ``features`` is [n x d]; ``B0``/``B1`` are the control/treated row blocks
    and ``target`` the treated mean of the features.
    """

    features: np.ndarray
    names: list[str]
    unit_treated: np.ndarray
    cluster: np.ndarray
    starts: np.ndarray
    treated: np.ndarray
    include_unit: bool
    center: np.ndarray
    scale: np.ndarray
    dropped: list[str] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n1(self) -> int:
        return int(self.unit_treated.sum())

    @property
    def n0(self) -> int:
        return int((~self.unit_treated).sum())

    @property
    def B0(self) -> np.ndarray:
        return self.features[~self.unit_treated]

    @property
    def B1(self) -> np.ndarray:
        return self.features[self.unit_treated]

    @property
    def target(self) -> np.ndarray:
        return self.B1.mean(axis=0)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.starts)

    @property
    def cluster_features(self) -> np.ndarray:
        """One row per cluster, [m x d]; only meaningful for cluster-only maps."""
        if self.include_unit:
            raise FeatureSpecError("cluster-compressed features need include_unit=false")
        return self.features[self.starts[:-1]]

    @property
    def Phi0(self) -> np.ndarray:
        return self.cluster_features[~self.treated]

    @property
    def sizes0(self) -> np.ndarray:
        return self.sizes[~self.treated]


def _pick(names: Sequence[str], wanted: Sequence[str] | None, kind: str) -> list[int]:
    if wanted is None:
        return list(range(len(names)))
    idx = []
    for name in wanted:
        if name not in names:
            raise UnknownCovariate(f"unknown {kind} covariate {name!r}")
        idx.append(names.index(name))
    return idx


def _standardize(cols: np.ndarray, names: list[str], do_scale: bool):
    center = cols.mean(axis=0)
    sd = cols.std(axis=0)
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(center))
    dropped = [nm for nm, k in zip(names, keep) if not k]
    for nm in dropped:
        warnings.warn(f"feature {nm!r} has zero variance and was dropped", ZeroVarianceFeature, stacklevel=3)
    cols, names, center, sd = cols[:, keep], [nm for nm, k in zip(names, keep) if k], center[keep], sd[keep]
    if do_scale:
        cols = (cols - center) / sd
    else:
        center = np.zeros_like(center)
        sd = np.ones_like(sd)
    return cols, names, center, sd, dropped


def build_features(dataset: CosDataset, spec: FeatureSpec) -> DesignMatrices:
    """Evaluate the feature map on every unit of ``dataset``."""
    w_idx = _pick(dataset.w_names, spec.cluster_covariates, "cluster")
    x_idx = _pick(dataset.x_names, spec.unit_covariates, "unit") if spec.include_unit else []
    w_names = [dataset.w_names[j] for j in w_idx]
    x_names = [dataset.x_names[j] for j in x_idx]
    for wn, xn in spec.interactions:
        if wn not in w_names:
            raise UnknownCovariate(f"unknown cluster covariate {wn!r} in interaction")
        if xn not in x_names:
            raise UnknownCovariate(f"unknown unit covariate {xn!r} in interaction")

    raw = np.hstack([dataset.unit_W[:, w_idx], dataset.X[:, x_idx]])
    raw_names = w_names + x_names
    raw, raw_names, _, _, dropped = _standardize(raw, raw_names, spec.standardize)

    cols = [raw]
    names = list(raw_names)
    if spec.polynomial_degree == 2:
        for a, b in itertools.combinations_with_replacement(range(raw.shape[1]), 2):
            cols.append((raw[:, a] * raw[:, b])[:, None])
            names.append(f"{raw_names[a]}^2" if a == b else f"{raw_names[a]}*{raw_names[b]}")
    for wn, xn in spec.interactions:
        if wn not in raw_names or xn not in raw_names:
            continue  # a dropped constant column interacts to nothing new
        name = f"{wn}*{xn}"
        if name in names or f"{xn}*{wn}" in names:
            continue
        cols.append((raw[:, raw_names.index(wn)] * raw[:, raw_names.index(xn)])[:, None])
        names.append(name)

    feats = np.hstack(cols) if cols else np.zeros((dataset.n, 0))
    # second pass: interactions and squares get mean 0 / sd 1 as well
    feats, names, center, scale, dropped2 = _standardize(feats, names, spec.standardize)
    return DesignMatrices(
        features=feats,
        names=names,
        unit_treated=np.asarray(dataset.unit_treated),
        cluster=np.asarray(dataset.cluster),
        starts=np.asarray(dataset.starts),
        treated=np.asarray(dataset.treated),
        include_unit=spec.include_unit,
        center=center,
        scale=scale,
        dropped=dropped + dropped2,
    )


def imbalance_vector(B0: np.ndarray, target: np.ndarray, gamma: np.ndarray, n1: float) -> np.ndarray:
    """Weighted control feature mean minus the treated target, ``B0' gamma / n1 - target``."""
    B0 = np.asarray(B0, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if B0.ndim != 2 or gamma.shape != (B0.shape[0],) or np.shape(target) != (B0.shape[1],):
        raise DimensionMismatch(
            f"B0 {B0.shape}, target {np.shape(target)} and gamma {gamma.shape} are inconsistent"
        )
    return B0.T @ gamma / n1 - target


def cluster_imbalance(Phi0: np.ndarray, sizes0: np.ndarray, target: np.ndarray,
                      gamma_bar: np.ndarray, n1: float) -> np.ndarray:
    """Imbalance for cluster-constant weights, using one row per control cluster."""
    return imbalance_vector(Phi0, target, np.asarray(sizes0) * np.asarray(gamma_bar), n1)
