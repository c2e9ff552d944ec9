"""Data-driven choice of the ICC and noise-to-signal hyperparameters.

A random-intercept working model is fit in two steps: least squares of the
outcome on the balance features, then one-way ANOVA (method of moments)
variance components on the residuals. The ICC is the cluster share of the
residual variance; the noise-to-signal ratio is the total residual variance
over the squared size of the fitted coefficients.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .data import CosDataset
from .transform import DesignMatrices


class TooFewClusters(ValueError):
    pass


class DegenerateResiduals(UserWarning):
    """Residuals have no variance; the ICC is reported as 0."""


class ZeroSignal(UserWarning):
    """Fitted coefficients are numerically zero; the ratio is capped."""


class HyperSource(str, enum.Enum):
    ESTIMATED = "estimated"
    USER_SUPPLIED = "user_supplied"


@dataclass(frozen=True)
class HyperParams:
    icc: float
    noise_to_signal: float
    source: HyperSource = HyperSource.USER_SUPPLIED
    var_cluster: float | None = None
    var_unit: float | None = None
    signal: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.icc <= 1.0:
            raise ValueError(f"icc must lie in [0, 1], got {self.icc}")
        if not self.noise_to_signal >= 0.0:
            raise ValueError(f"noise_to_signal must be nonnegative, got {self.noise_to_signal}")


def anova_components(resid: np.ndarray, cluster: np.ndarray) -> tuple[float, float]:
    """One-way random-effects ANOVA estimates ``(var_cluster, var_unit)``.

    ``cluster`` holds integer labels. Uses the unbalanced-design average
    cluster size ``(N - sum n_l^2 / N) / (m - 1)``; the between component is
    truncated at zero.
    """
    resid = np.asarray(resid, dtype=float)
    _, cluster = np.unique(cluster, return_inverse=True)
    sizes = np.bincount(cluster).astype(float)
    m, N = len(sizes), float(len(resid))
    if m < 2:
        raise TooFewClusters(f"need at least 2 clusters, got {m}")
    if N <= m:
        raise TooFewClusters("need more units than clusters for a within-cluster variance")
    means = np.bincount(cluster, weights=resid) / sizes
    grand = resid.mean()
    ssw = float(np.sum((resid - means[cluster]) ** 2))
    ssb = float(np.sum(sizes * (means - grand) ** 2))
    msw = ssw / (N - m)
    msb = ssb / (m - 1)
    n_tilde = (N - np.sum(sizes ** 2) / N) / (m - 1)
    return max(0.0, (msb - msw) / n_tilde), msw


def fit_random_intercept(dataset: CosDataset, features: DesignMatrices, side: str = "control_only",
                         ridge: float = 1e-8, clusters: np.ndarray | None = None):
    """Fit the random-intercept working model.

    Parameters
    ----------
    side : {"control_only", "pooled"}
        Units used for the fit. ``pooled`` adds a treatment indicator so the
        treatment effect does not leak into the residuals.
    clusters : optional bool mask [m]
        Further restrict the fit to these clusters (e.g. a holdout split).

    Returns
    -------
    beta_hat : coefficients on the features (intercept and any treatment
        indicator excluded)
    var_cluster, var_unit : ANOVA variance components of the residuals
    """
    if side not in ("control_only", "pooled"):
        raise ValueError(f"unknown fit side {side!r}")
    use = np.ones(dataset.n, bool) if side == "pooled" else ~dataset.unit_treated
    if clusters is not None:
        use &= np.asarray(clusters, bool)[dataset.cluster]
    n_clusters = len(np.unique(dataset.cluster[use]))
    if n_clusters < 2:
        raise TooFewClusters(f"{n_clusters} cluster(s) available on side {side!r}")

    F = features.features[use]
    y = dataset.y[use]
    cols = [np.ones((len(y), 1)), F]
    if side == "pooled":
        cols.append(dataset.unit_treated[use].astype(float)[:, None])
    Z = np.hstack(cols)
    pen = np.full(Z.shape[1], ridge)
    pen[0] = 0.0
    coef = np.linalg.solve(Z.T @ Z + np.diag(pen * len(y)), Z.T @ y)
    resid = y - Z @ coef
    beta = coef[1:1 + F.shape[1]]

    if np.ptp(resid) <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
        warnings.warn("residuals are constant; variance components set to 0", DegenerateResiduals, stacklevel=2)
        return beta, 0.0, 0.0
    var_cluster, var_unit = anova_components(resid, dataset.cluster[use])
    return beta, var_cluster, var_unit


def hyperparams_from_components(var_cluster: float, var_unit: float, beta: np.ndarray,
                                signal: str = "norm", zero_signal_cap: float = 1e6) -> HyperParams:
    """Turn variance components and coefficients into ``HyperParams``.

    ``signal="norm"`` uses ||beta||^2; ``signal="squared_sum"`` uses (sum beta)^2.
    """
    total = var_cluster + var_unit
    icc = min(1.0, max(0.0, var_cluster / total)) if total > 0 else 0.0
    beta = np.asarray(beta, dtype=float)
    if signal == "norm":
        c2 = float(beta @ beta)
    elif signal == "squared_sum":
        c2 = float(beta.sum()) ** 2
    else:
        raise ValueError(f"unknown signal measure {signal!r}")
    if c2 < 1e-12:
        warnings.warn(f"coefficient signal {c2:.3g} is ~0; noise_to_signal capped at {zero_signal_cap}",
                      ZeroSignal, stacklevel=2)
        ratio = float(zero_signal_cap)
    else:
        ratio = total / c2
    return HyperParams(icc=icc, noise_to_signal=ratio, source=HyperSource.ESTIMATED,
                       var_cluster=var_cluster, var_unit=var_unit, signal=c2)


def heuristic_hyperparams(dataset: CosDataset, features: DesignMatrices, side: str = "control_only",
                          signal: str = "norm", zero_signal_cap: float = 1e6,
                          holdout_fraction: float = 0.0, seed: int = 0) -> HyperParams:
    """Estimate ``HyperParams`` from the random-intercept working model.

    With ``holdout_fraction`` > 0, only that random fraction of the clusters
    on the fitting side is used, so the outcomes of the remaining clusters
    never influence the weights through the hyperparameters.
    """
    mask = None
    if holdout_fraction:
        if not 0.0 < holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        eligible = np.flatnonzero(np.ones(dataset.m, bool) if side == "pooled" else ~dataset.treated)
        k = max(2, int(round(holdout_fraction * len(eligible))))
        mask = np.zeros(dataset.m, bool)
        mask[rng.choice(eligible, size=min(k, len(eligible)), replace=False)] = True
    beta, vc, vu = fit_random_intercept(dataset, features, side=side, clusters=mask)
    return hyperparams_from_components(vc, vu, beta, signal=signal, zero_signal_cap=zero_signal_cap)
