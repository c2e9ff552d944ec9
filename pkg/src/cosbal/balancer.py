"""The three balancing problems for clustered designs.

``unit``
    Control-unit weights balancing psi(w, x) toward the treated mean, with a
    random-effects variance penalty mixing sum g_i^2 and (sum g_i)^2 within
    each control cluster.
``cluster_only``
    One weight per control cluster balancing phi(w); the penalty on cluster
    weight gbar_l is proportional to (1 - r) n_l + r n_l^2.
``subset``
    Weights on both arms balancing the weighted treated and control means
    against each other (an overlap-type estimand).

All weights are returned as a length-n vector aligned with the dataset. In
the ATT modes treated units carry weight 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import CosDataset
from .hyperparams import HyperParams, heuristic_hyperparams
from .qp import PenaltyStructure, QpProblem, QpSolution, SumConstraint, solve
from .transform import DesignMatrices, FeatureSpec, FeatureSpecError, build_features


class Mode(str, enum.Enum):
    UNIT = "unit"
    CLUSTER_ONLY = "cluster_only"
    SUBSET = "subset"


@dataclass(frozen=True)
class BalanceSpec:
    mode: Mode = Mode.UNIT
    hyper: HyperParams | None = None  # None: heuristic estimate at fit time
    lower: float = 0.0
    upper: float = np.inf
    max_iter: int = 10000
    tol: float = 1e-8
    hyper_side: str = "control_only"
    hyper_signal: str = "norm"
    hyper_holdout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.lower > self.upper:
            raise ValueError("lower bound exceeds upper bound")


@dataclass
class WeightSolution:
    mode: Mode
    weights: np.ndarray  # [n], dataset order
    cluster_weights: np.ndarray  # [m], mean unit weight per cluster
    solution_meta: QpSolution
    hyper: HyperParams
    features: DesignMatrices
    ess_control: float
    ess_treated: float | None = None

    @property
    def control_weights(self) -> np.ndarray:
        return self.weights[~self.features.unit_treated]

    @property
    def treated_weights(self) -> np.ndarray:
        return self.weights[self.features.unit_treated]

    @property
    def converged(self) -> bool:
        return self.solution_meta.converged


def kish_ess(weights) -> float:
    """Kish effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=float)
    ss = float(w @ w)
    return float(w.sum()) ** 2 / ss if ss > 0 else 0.0


def _cluster_blocks(sizes: np.ndarray) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)])


def build_unit_problem(dataset: CosDataset, features: DesignMatrices, hyper: HyperParams,
                       lower: float = 0.0, upper: float = np.inf) -> QpProblem:
    """QP over control-unit weights (dataset order restricted to controls)."""
    n1 = dataset.n1
    ratio, rho = hyper.noise_to_signal, hyper.icc
    sizes0 = dataset.sizes[~dataset.treated]
    scale = ratio / n1 ** 2
    penalty = PenaltyStructure(_cluster_blocks(sizes0), scale * (1.0 - rho), scale * rho)
    k = int(sizes0.sum())
    return QpProblem(
        M=features.B0.T / n1,
        t=features.target,
        penalty=penalty,
        sum_constraints=[SumConstraint(np.arange(k), n1)],
        lower=lower,
        upper=upper,
    )


def build_cluster_problem(dataset: CosDataset, features: DesignMatrices, hyper: HyperParams,
                          lower: float = 0.0, upper: float = np.inf) -> QpProblem:
    """QP over one weight per control cluster."""
    if features.include_unit:
        raise FeatureSpecError("cluster_only balancing requires include_unit=false features")
    n1 = dataset.n1
    ratio, r = hyper.noise_to_signal, hyper.icc
    sizes0 = dataset.sizes[~dataset.treated].astype(float)
    m0 = len(sizes0)
    diag = ratio / n1 ** 2 * ((1.0 - r) * sizes0 + r * sizes0 ** 2)
    penalty = PenaltyStructure(np.arange(m0 + 1), diag, 0.0)
    return QpProblem(
        M=(features.Phi0 * sizes0[:, None]).T / n1,
        t=features.target,
        penalty=penalty,
        sum_constraints=[SumConstraint(np.arange(m0), n1, coef=sizes0)],
        lower=lower,
        upper=upper,
    )


def build_subset_problem(dataset: CosDataset, features: DesignMatrices, hyper: HyperParams,
                         lower: float = 0.0, upper: float = np.inf) -> QpProblem:
    """QP over every unit's weight, in dataset order."""
    n1, n0 = dataset.n1, dataset.n0
    ratio, rho = hyper.noise_to_signal, hyper.icc
    ut = dataset.unit_treated
    col_scale = np.where(ut, -1.0 / n1, 1.0 / n0)
    block_scale = ratio * np.where(dataset.treated, 1.0 / n1, 1.0 / n0) ** 2
    penalty = PenaltyStructure(dataset.starts, block_scale * (1.0 - rho), block_scale * rho)
    return QpProblem(
        M=(features.features * col_scale[:, None]).T,
        t=np.zeros(features.d),
        penalty=penalty,
        sum_constraints=[
            SumConstraint(np.flatnonzero(~ut), n0),
            SumConstraint(np.flatnonzero(ut), n1),
        ],
        lower=lower,
        upper=upper,
    )


def resolve_hyper(dataset: CosDataset, features: DesignMatrices, spec: BalanceSpec) -> HyperParams:
    if spec.hyper is not None:
        return spec.hyper
    return heuristic_hyperparams(dataset, features, side=spec.hyper_side, signal=spec.hyper_signal,
                                 holdout_fraction=spec.hyper_holdout)


def fit(dataset: CosDataset, featurespec: FeatureSpec | DesignMatrices, balancespec: BalanceSpec) -> WeightSolution:
    """Build features (unless given), choose hyperparameters, and solve."""
    mode = balancespec.mode
    features = featurespec if isinstance(featurespec, DesignMatrices) else build_features(dataset, featurespec)
    if mode is Mode.CLUSTER_ONLY and features.include_unit:
        raise FeatureSpecError("mode cluster_only requires include_unit=false")
    hyper = resolve_hyper(dataset, features, balancespec)
    builder = {
        Mode.UNIT: build_unit_problem,
        Mode.CLUSTER_ONLY: build_cluster_problem,
        Mode.SUBSET: build_subset_problem,
    }[mode]
    problem = builder(dataset, features, hyper, balancespec.lower, balancespec.upper)
    sol = solve(problem, max_iter=balancespec.max_iter, tol=balancespec.tol)

    ut = dataset.unit_treated
    weights = np.ones(dataset.n)
    if mode is Mode.UNIT:
        weights[~ut] = sol.gamma
    elif mode is Mode.CLUSTER_ONLY:
        per_cluster = np.ones(dataset.m)
        per_cluster[~dataset.treated] = sol.gamma
        weights = per_cluster[dataset.cluster]
    else:
        weights = sol.gamma.copy()
    cluster_weights = dataset.cluster_sums(weights) / dataset.sizes
    return WeightSolution(
        mode=mode,
        weights=weights,
        cluster_weights=cluster_weights,
        solution_meta=sol,
        hyper=hyper,
        features=features,
        ess_control=kish_ess(weights[~ut]),
        ess_treated=kish_ess(weights[ut]) if mode is Mode.SUBSET else None,
    )
