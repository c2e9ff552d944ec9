"""Effect estimates, bias correction and cluster-robust variances.

Weights are length-n vectors aligned with the dataset (treated entries are
ignored by the ATT functions). Variances are cluster-sum forms:

    V = (1 / n1^2) * sum over control clusters of (sum_i g_i e_i)^2

where e are residuals from an outcome model (plug-in) or from the weighted
control mean (sandwich).
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .balancer import Mode, WeightSolution
from .data import CosDataset
from .transform import DesignMatrices, imbalance_vector


class SingularSystem(UserWarning):
    """Ridge penalty was raised to make the normal equations solvable."""


class SingleClusterVariance(UserWarning):
    """Variance estimated from a single cluster; it is unstable."""


class Estimand(str, enum.Enum):
    ATT_UNIT = "att_unit"
    ATT_CLUSTER = "att_cluster"
    ATO_SUBSET = "ato_subset"


@dataclass
class OutcomeModel:
    beta: np.ndarray
    intercept: float
    ridge_lambda: float
    fitted_on: str  # "controls" or "treated"

    def predict(self, F: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(F, dtype=float) @ self.beta


@dataclass
class EffectEstimate:
    estimand: Estimand
    point: float
    point_bias_corrected: float | None
    var_plugin: float
    var_sandwich: float
    ci_plugin: tuple[float, float]
    ci_sandwich: tuple[float, float]
    alpha: float
    ess_control: float | None = None
    ess_treated: float | None = None
    design_effect: float | None = None
    imbalance_norm: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def se_plugin(self) -> float:
        return math.sqrt(self.var_plugin)

    @property
    def se_sandwich(self) -> float:
        return math.sqrt(self.var_sandwich)


def _controls(dataset: CosDataset) -> np.ndarray:
    return ~np.asarray(dataset.unit_treated)


def weighted_mu0(dataset: CosDataset, weights) -> float:
    """``(1/n1) * sum over control units of g_i Y_i``."""
    c = _controls(dataset)
    return float(np.asarray(weights, dtype=float)[c] @ dataset.y[c]) / dataset.n1


def att_estimate(dataset: CosDataset, weights) -> float:
    return float(dataset.y[dataset.unit_treated].mean()) - weighted_mu0(dataset, weights)


def ato_estimate(dataset: CosDataset, weights) -> float:
    """``(1/n1) sum_treated g Y - (1/n0) sum_control g Y``."""
    w = np.asarray(weights, dtype=float)
    t = np.asarray(dataset.unit_treated)
    return float(w[t] @ dataset.y[t]) / dataset.n1 - float(w[~t] @ dataset.y[~t]) / dataset.n0


def default_ridge(F: np.ndarray) -> float:
    d = F.shape[1]
    return 1e-3 * float(np.sum(F * F)) / d if d else 0.0


def fit_outcome_model(dataset: CosDataset, features: DesignMatrices, side: str = "controls",
                      weights=None, ridge_lambda: float | None = None) -> OutcomeModel:
    """Weighted ridge regression with an unpenalized intercept on one arm.

    Minimizes ``sum w_i (y_i - a - beta . psi_i)^2 + lam ||beta||^2`` over the
    units of ``side``; ``weights`` is length n (dataset order) or None for 1.
    """
    if side not in ("controls", "treated"):
        raise ValueError(f"unknown side {side!r}")
    mask = np.asarray(dataset.unit_treated) if side == "treated" else _controls(dataset)
    F = features.features[mask]
    y = dataset.y[mask]
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)[mask]
    if np.count_nonzero(w > 0) < 2:
        raise ValueError("outcome model needs at least 2 units with positive weight")
    lam = default_ridge(F) if ridge_lambda is None else float(ridge_lambda)

    sw = w.sum()
    xbar = w @ F / sw
    ybar = float(w @ y) / sw
    Fc = F - xbar
    A = Fc.T @ (Fc * w[:, None])
    b = Fc.T @ (w * (y - ybar))
    d = F.shape[1]
    while True:
        try:
            beta = np.linalg.solve(A + lam * np.eye(d), b) if d else np.zeros(0)
            if np.all(np.isfinite(beta)):
                break
        except np.linalg.LinAlgError:
            pass
        new = max(10.0 * lam, 1e-8 * max(1.0, float(np.trace(A)) / max(d, 1)))
        warnings.warn(f"singular normal equations; ridge raised from {lam:.3g} to {new:.3g}", SingularSystem,
                      stacklevel=2)
        lam = new
    return OutcomeModel(beta=beta, intercept=ybar - float(xbar @ beta), ridge_lambda=lam, fitted_on=side)


def bias_corrected_mu0(dataset: CosDataset, weights, model: OutcomeModel, features: DesignMatrices) -> float:
    """mu0_hat + mean over treated of m_hat - (1/n1) sum over controls of g m_hat."""
    c = _controls(dataset)
    w = np.asarray(weights, dtype=float)
    pred = model.predict(features.features)
    return (weighted_mu0(dataset, w)
            + float(pred[~c].sum()) / dataset.n1
            - float(w[c] @ pred[c]) / dataset.n1)


def cluster_sum_variance(dataset: CosDataset, weights, resid, side: str, norm: float) -> float:
    """``(1/norm^2) * sum over clusters of side of (sum_i w_i e_i)^2``.

    ``resid`` is length n; entries of the other arm are ignored.
    """
    w = np.asarray(weights, dtype=float)
    e = np.asarray(resid, dtype=float)
    arm = np.asarray(dataset.treated) if side == "treated" else ~np.asarray(dataset.treated)
    if arm.sum() == 1:
        warnings.warn(f"single {side} cluster: variance estimate is unstable", SingleClusterVariance,
                      stacklevel=2)
    unit_arm = arm[dataset.cluster]
    sums = dataset.cluster_sums(np.where(unit_arm, w * e, 0.0))[arm]
    return float(sums @ sums) / norm ** 2


def var_plugin_unit(dataset: CosDataset, weights, model: OutcomeModel, features: DesignMatrices) -> float:
    resid = dataset.y - model.predict(features.features)
    return cluster_sum_variance(dataset, weights, resid, "controls", dataset.n1)


def var_sandwich(dataset: CosDataset, weights) -> float:
    """Plug-in variance with an intercept-only model at the weighted control mean."""
    c = _controls(dataset)
    w = np.asarray(weights, dtype=float)
    center = float(w[c] @ dataset.y[c]) / float(w[c].sum())
    return cluster_sum_variance(dataset, w, dataset.y - center, "controls", dataset.n1)


def var_plugin_cluster(dataset: CosDataset, cluster_weights, model: OutcomeModel, features: DesignMatrices) -> float:
    """``(1/n1^2) sum over control clusters gbar_l^2 (sum_i e_i)^2``."""
    return _cluster_only_variance(dataset, cluster_weights, dataset.y - model.predict(features.features))


def _cluster_only_variance(dataset: CosDataset, cluster_weights, resid) -> float:
    gbar = np.asarray(cluster_weights, dtype=float)
    sums = dataset.cluster_sums(np.asarray(resid, dtype=float))
    ctrl = ~np.asarray(dataset.treated)
    if ctrl.sum() == 1:
        warnings.warn("single control cluster: variance estimate is unstable", SingleClusterVariance, stacklevel=2)
    return float(np.sum(gbar[ctrl] ** 2 * sums[ctrl] ** 2)) / dataset.n1 ** 2


def design_effect(dataset: CosDataset, weights_unit, weights_cluster, rho: float) -> float:
    """Variance inflation of unit-varying weights over cluster-constant weights.

    ``weights_unit`` is length n, ``weights_cluster`` length m; only control
    clusters enter.
    """
    ctrl = ~np.asarray(dataset.treated)
    g = np.where(dataset.unit_treated, 0.0, np.asarray(weights_unit, dtype=float))
    gbar = np.asarray(weights_cluster, dtype=float)[ctrl]
    n_l = dataset.sizes[ctrl]
    sums = dataset.cluster_sums(g)[ctrl]
    num = (1 - rho) * float(g @ g) + rho * float(sums @ sums)
    den = (1 - rho) * float(n_l @ gbar ** 2) + rho * float(np.sum((n_l * gbar) ** 2))
    if den <= 0:
        raise ZeroDivisionError("design effect denominator is zero (all control cluster weights vanish)")
    return num / den


def normal_quantile(p: float) -> float:
    return float(stats.norm.ppf(p))


def confidence_interval(point: float, var: float, alpha: float = 0.05) -> tuple[float, float]:
    if var < 0:
        raise ValueError("variance must be nonnegative")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    half = normal_quantile(1 - alpha / 2) * math.sqrt(var)
    return point - half, point + half


def plugin_residuals(dataset: CosDataset, features: DesignMatrices, side: str = "controls", weights=None,
                     ridge_lambda: float | None = None, crossfit_folds: int = 0, seed: int = 0) -> np.ndarray:
    """Outcome-model residuals for the plug-in variance, length n.

    With ``crossfit_folds`` = 0 the model is fit once and residuals are
    in-sample. Otherwise the clusters of ``side`` are split at random into that
    many folds and each fold's residuals come from a model fit on the other
    folds, so cluster effects cannot be absorbed by the fit. A fold whose
    complement cannot support a fit falls back to the in-sample model.
    """
    full = fit_outcome_model(dataset, features, side, weights, ridge_lambda)
    resid = dataset.y - full.predict(features.features)
    if crossfit_folds <= 0:
        return resid
    arm = np.asarray(dataset.treated) if side == "treated" else ~np.asarray(dataset.treated)
    ids = np.flatnonzero(arm)
    k = min(int(crossfit_folds), len(ids))
    if k < 2:
        return resid
    rng = np.random.default_rng(seed)
    w = np.ones(dataset.n) if weights is None else np.asarray(weights, dtype=float)
    for fold in np.array_split(rng.permutation(ids), k):
        held = np.isin(dataset.cluster, fold)
        w_train = np.where(held, 0.0, w)
        if np.count_nonzero(w_train[arm[dataset.cluster]] > 0) < 2:
            continue
        model = fit_outcome_model(dataset, features, side, w_train, full.ridge_lambda)
        resid[held] = dataset.y[held] - model.predict(features.features[held])
    return resid


def _treated_term(dataset, features, ridge_lambda, intercept_only: bool, crossfit_folds: int = 0) -> float:
    t = np.asarray(dataset.unit_treated)
    if intercept_only:
        resid = dataset.y - dataset.y[t].mean()
    else:
        resid = plugin_residuals(dataset, features, "treated", None, ridge_lambda, crossfit_folds)
    return cluster_sum_variance(dataset, np.ones(dataset.n), resid, "treated", dataset.n1)


def estimate(dataset: CosDataset, solution: WeightSolution, alpha: float = 0.05,
             ridge_lambda: float | None = None, include_treated_variance: bool = False,
             bias_correct: bool = True, crossfit_folds: int = 0) -> EffectEstimate:
    """Point estimate, bias-corrected estimate, both variances and CIs.

    ``crossfit_folds`` > 0 computes the plug-in residuals by cluster-fold
    cross-fitting (see ``plugin_residuals``); the bias correction always uses
    the model fit on all units of the arm.

    ``include_treated_variance`` adds the treated clusters' residual
    cluster-sum term to the ATT variances, so the interval also reflects
    sampling noise in the treated mean. By default the variance conditions on
    the design and treats only the weighted control sum as random.
    """
    feats = solution.features
    w = solution.weights
    n1, n0 = dataset.n1, dataset.n0
    extras: dict = {}
    if solution.mode is Mode.SUBSET:
        estimand = Estimand.ATO_SUBSET
        point = ato_estimate(dataset, w)
        m_c = fit_outcome_model(dataset, feats, "controls", w, ridge_lambda)
        res_c = plugin_residuals(dataset, feats, "controls", w, ridge_lambda, crossfit_folds)
        res_t = plugin_residuals(dataset, feats, "treated", w, ridge_lambda, crossfit_folds)
        var_p = (cluster_sum_variance(dataset, w, res_t, "treated", n1)
                 + cluster_sum_variance(dataset, w, res_c, "controls", n0))
        t = np.asarray(dataset.unit_treated)
        cen_t = float(w[t] @ dataset.y[t]) / float(w[t].sum())
        cen_c = float(w[~t] @ dataset.y[~t]) / float(w[~t].sum())
        var_s = (cluster_sum_variance(dataset, w, dataset.y - cen_t, "treated", n1)
                 + cluster_sum_variance(dataset, w, dataset.y - cen_c, "controls", n0))
        pb = None
        if bias_correct:
            pred = m_c.predict(feats.features)
            pb = point - (float(w[t] @ pred[t]) / n1 - float(w[~t] @ pred[~t]) / n0)
        imb = feats.B0.T @ w[~t] / n0 - feats.B1.T @ w[t] / n1
    else:
        estimand = Estimand.ATT_UNIT if solution.mode is Mode.UNIT else Estimand.ATT_CLUSTER
        point = att_estimate(dataset, w)
        model = fit_outcome_model(dataset, feats, "controls", w, ridge_lambda)
        resid = (plugin_residuals(dataset, feats, "controls", w, ridge_lambda, crossfit_folds)
                 if crossfit_folds else dataset.y - model.predict(feats.features))
        if solution.mode is Mode.CLUSTER_ONLY:
            var_p = _cluster_only_variance(dataset, solution.cluster_weights, resid)
        else:
            var_p = cluster_sum_variance(dataset, w, resid, "controls", n1)
        var_s = var_sandwich(dataset, w)
        if crossfit_folds:
            extras["crossfit_folds"] = int(crossfit_folds)
        if include_treated_variance:
            var_p += _treated_term(dataset, feats, ridge_lambda, intercept_only=False, crossfit_folds=crossfit_folds)
            var_s += _treated_term(dataset, feats, ridge_lambda, intercept_only=True)
            extras["treated_variance_included"] = True
        pb = None
        if bias_correct:
            pb = float(dataset.y[dataset.unit_treated].mean()) - bias_corrected_mu0(dataset, w, model, feats)
        c = ~np.asarray(dataset.unit_treated)
        imb = imbalance_vector(feats.B0, feats.target, w[c], n1)

    deff = None
    if solution.mode is not Mode.SUBSET:
        deff = design_effect(dataset, w, solution.cluster_weights, solution.hyper.icc)
    return EffectEstimate(
        estimand=estimand,
        point=point,
        point_bias_corrected=pb,
        var_plugin=var_p,
        var_sandwich=var_s,
        ci_plugin=confidence_interval(point, var_p, alpha),
        ci_sandwich=confidence_interval(point, var_s, alpha),
        alpha=alpha,
        ess_control=solution.ess_control,
        ess_treated=solution.ess_treated,
        design_effect=deff,
        imbalance_norm=float(np.linalg.norm(imb)),
        extras=extras,
    )
