"""Balance tables and weight summaries."""

from __future__ import annotations

import numpy as np
import pandas as pd

from .balancer import kish_ess
from .data import CosDataset

QUANTILES = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0)


def raw_covariates(dataset: CosDataset) -> tuple[np.ndarray, list[str]]:
    """Unit covariates next to cluster covariates evaluated per unit."""
    return np.hstack([dataset.X, dataset.unit_W]), list(dataset.x_names) + list(dataset.w_names)


def _wmean(values: np.ndarray, w: np.ndarray) -> np.ndarray:
    return w @ values / w.sum()


def standardized_differences(dataset: CosDataset, weights=None) -> pd.DataFrame:
    """Treated minus control mean over the unadjusted pooled SD, per covariate.

    With ``weights`` (length n), both arms use weighted means; ATT weights keep
    the treated side at weight 1. The pooled SD ``sqrt((s_t^2 + s_c^2) / 2)``
    always comes from the unweighted data. A zero pooled SD gives 0 and sets
    ``zero_sd``.
    """
    V, names = raw_covariates(dataset)
    t = np.asarray(dataset.unit_treated)
    sd = np.sqrt((V[t].var(axis=0, ddof=1) + V[~t].var(axis=0, ddof=1)) / 2)
    zero = sd <= 1e-12
    safe = np.where(zero, 1.0, sd)
    out = pd.DataFrame({"covariate": names})
    out["unweighted"] = np.where(zero, 0.0, (V[t].mean(axis=0) - V[~t].mean(axis=0)) / safe)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        diff = _wmean(V[t], w[t]) - _wmean(V[~t], w[~t])
        out["weighted"] = np.where(zero, 0.0, diff / safe)
    out["pooled_sd"] = sd
    out["zero_sd"] = zero
    return out


def weight_summary(weights, threshold: float = 10.0, quantiles=QUANTILES) -> dict:
    w = np.asarray(weights, dtype=float)
    qs = np.quantile(w, quantiles) if w.size else np.full(len(quantiles), np.nan)
    return {
        "count": int(w.size),
        "sum": float(w.sum()),
        "min": float(w.min()) if w.size else float("nan"),
        "max": float(w.max()) if w.size else float("nan"),
        "threshold": float(threshold),
        "count_above": int(np.sum(w > threshold)),
        "count_zero": int(np.sum(w <= 1e-10)),
        "quantiles": {f"q{q:g}": float(v) for q, v in zip(quantiles, qs)},
        "ess": kish_ess(w),
    }


def estimand_profile(dataset: CosDataset, subset_weights) -> pd.DataFrame:
    """Raw and weighted covariate means for each arm (side-normalized weights)."""
    V, names = raw_covariates(dataset)
    t = np.asarray(dataset.unit_treated)
    w = np.asarray(subset_weights, dtype=float)
    return pd.DataFrame({
        "covariate": names,
        "treated_raw": V[t].mean(axis=0),
        "treated_weighted": _wmean(V[t], w[t]),
        "control_raw": V[~t].mean(axis=0),
        "control_weighted": _wmean(V[~t], w[~t]),
    })


def format_table(df: pd.DataFrame, digits: int = 3) -> str:
    """Aligned plain-text rendering."""
    return df.to_string(index=False, float_format=lambda v: f"{v:.{digits}f}")
