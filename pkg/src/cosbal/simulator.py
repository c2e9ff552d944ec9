"""Monte Carlo study of clustered balancing-weight estimators.

The base population is synthetic: schools with a latent quality index that
shifts student reading/math scores and four school-level draws (free lunch,
English learners, novice teachers, attendance). A logistic model fitted to a
synthetic school-level assignment gives the base propensity e(w); treatment
is then

    Z* = e(w) / c + Unif(-0.5, 0.5),   Z = 1(Z* > 0.25)

so small ``c`` means poor overlap. Control potential outcomes are

    y0 = b0 + 2.5 R + 2.5 M + 1.9 P + v

with P the school's percent proficient and v = school effect + student noise
(total sd ``noise_sd``), and y1 = y0 + tau.

Every replication draws from its own ``SeedSequence`` keyed by
(seed, scenario, replication), so results do not depend on worker count or
on which other scenarios are run.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import optimize, special

from .balancer import BalanceSpec, Mode, fit
from .data import CosDataset
from .estimator import estimate
from .hyperparams import anova_components
from .transform import FeatureSpec, build_features

logger = logging.getLogger(__name__)

UNIT_NAMES = ("read", "math", "minority", "hispanic", "female")
CLUSTER_NAMES = ("read_mean", "pct_proficient", "pct_minority", "pct_hispanic", "pct_female",
                 "frl", "ell", "novice", "attendance")
SELECTION_NAMES = ("frl", "ell", "novice", "attendance")
ESTIMATORS = ("naive", "balancing", "subset_weights")


class AllTreatedOrAllControl(RuntimeError):
    pass


@dataclass(frozen=True)
class DgpParams:
    """Constants of the synthetic population and outcome model."""

    score_mean: float = 50.0
    score_sd: float = 10.0
    score_corr: float = 0.6
    school_score_sd: float = 5.0  # sd of the school-mean shift in scores
    min_cluster_size: int = 5
    intercept: float = 50.0
    coef_read: float = 2.5
    coef_math: float = 2.5
    coef_proficient: float = 1.9
    cluster_noise_share: float = 0.29  # share of noise variance at the school level
    # synthetic "true assignment" logit on standardized (frl, ell, novice, attendance)
    assignment_coef: tuple[float, float, float, float] = (-0.18, -0.08, -0.06, 0.18)
    assignment_intercept: float = -0.5


@dataclass
class Population:
    """Covariates of one synthetic population (no treatment, no outcomes)."""

    sizes: np.ndarray
    X: np.ndarray  # [n x 5]
    W: np.ndarray  # [m x 9]
    propensity: np.ndarray  # [m], fitted e(w)

    @property
    def n(self) -> int:
        return int(self.sizes.sum())

    @property
    def m(self) -> int:
        return len(self.sizes)

    @property
    def cluster(self) -> np.ndarray:
        return np.repeat(np.arange(self.m), self.sizes)

    def select(self, idx) -> Population:
        idx = np.asarray(idx)
        starts = np.concatenate([[0], np.cumsum(self.sizes)])
        rows = np.concatenate([np.arange(starts[k], starts[k + 1]) for k in idx])
        return Population(self.sizes[idx], self.X[rows], self.W[idx], self.propensity[idx])

    def to_dataset(self, treated, y) -> CosDataset:
        cluster = self.cluster
        return CosDataset(
            np.arange(self.n), cluster, self.X, y, np.arange(self.m), treated, self.W,
            UNIT_NAMES, CLUSTER_NAMES,
        )


def fit_logistic(F: np.ndarray, z: np.ndarray, ridge: float = 1e-2) -> np.ndarray:
    """Ridge-stabilized logistic regression; returns fitted probabilities."""
    Z = np.hstack([np.ones((len(z), 1)), F])

    def loss(b):
        eta = Z @ b
        return float(np.sum(np.logaddexp(0.0, eta) - z * eta) + 0.5 * ridge * b[1:] @ b[1:])

    def grad(b):
        g = Z.T @ (special.expit(Z @ b) - z)
        g[1:] += ridge * b[1:]
        return g

    res = optimize.minimize(loss, np.zeros(Z.shape[1]), jac=grad, method="BFGS")
    return special.expit(Z @ res.x)


def generate_base_population(seed, n_clusters: int = 44, mean_cluster_size: int = 78,
                             params: DgpParams = DgpParams()) -> Population:
    """Draw a synthetic school/student population."""
    if n_clusters < 2 or mean_cluster_size < 1:
        raise ValueError("n_clusters must be >= 2 and mean_cluster_size >= 1")
    rng = np.random.default_rng(seed)
    sizes = np.maximum(params.min_cluster_size, rng.poisson(mean_cluster_size, n_clusters))
    m, n = n_clusters, int(sizes.sum())
    cluster = np.repeat(np.arange(m), sizes)

    quality = rng.standard_normal(m)
    p_min = special.expit(-0.8 * quality - 0.5 + 0.7 * rng.standard_normal(m))
    p_his = special.expit(-0.5 * quality - 1.2 + 0.7 * rng.standard_normal(m))
    p_fem = np.clip(0.5 + 0.03 * rng.standard_normal(m), 0.3, 0.7)

    # scores: school shift plus student deviations, overall sd score_sd and corr score_corr
    s2, a2 = params.score_sd ** 2, params.school_score_sd ** 2
    b2 = s2 - a2
    rho_within = (params.score_corr * s2 - a2) / b2
    z1 = rng.standard_normal(n)
    z2 = rho_within * z1 + math.sqrt(1 - rho_within ** 2) * rng.standard_normal(n)
    shift = params.school_score_sd * quality[cluster]
    read = params.score_mean + shift + math.sqrt(b2) * z1
    math_ = params.score_mean + shift + math.sqrt(b2) * z2
    minority = (rng.random(n) < p_min[cluster]).astype(float)
    hispanic = (rng.random(n) < p_his[cluster]).astype(float)
    female = (rng.random(n) < p_fem[cluster]).astype(float)
    X = np.column_stack([read, math_, minority, hispanic, female])

    starts = np.concatenate([[0], np.cumsum(sizes)])

    def agg(v):
        return np.add.reduceat(v, starts[:-1]) / sizes

    proficient = ((read > params.score_mean) & (math_ > params.score_mean)).astype(float)
    frl = special.expit(-1.0 * quality - 0.2 + 0.5 * rng.standard_normal(m))
    ell = special.expit(-0.6 * quality - 1.5 + 0.6 * rng.standard_normal(m))
    novice = special.expit(-0.4 * quality - 1.5 + 0.6 * rng.standard_normal(m))
    attendance = special.expit(0.8 * quality + 2.5 + 0.5 * rng.standard_normal(m))
    W = np.column_stack([
        agg(read), 100.0 * agg(proficient), agg(minority), agg(hispanic), agg(female),
        frl, ell, novice, attendance,
    ])

    # synthetic observed assignment, then the fitted base propensity e(w)
    S = W[:, [CLUSTER_NAMES.index(nm) for nm in SELECTION_NAMES]]
    S = (S - S.mean(axis=0)) / S.std(axis=0)
    logit = params.assignment_intercept + S @ np.asarray(params.assignment_coef)
    z_true = (rng.random(m) < special.expit(logit)).astype(float)
    if z_true.min() == z_true.max():
        z_true[np.argmax(logit)], z_true[np.argmin(logit)] = 1.0, 0.0
    propensity = fit_logistic(S, z_true)
    return Population(sizes=sizes, X=X, W=W, propensity=propensity)


def assign_treatment(population: Population, c: float, rng: np.random.Generator,
                     max_attempts: int = 100, min_per_arm: int = 1) -> np.ndarray:
    """Cluster treatment indicators from the overlap-scaled latent index."""
    if c <= 0:
        raise ValueError("overlap constant c must be positive")
    for _ in range(max_attempts):
        latent = population.propensity / c + rng.uniform(-0.5, 0.5, population.m)
        z = latent > 0.25
        if min_per_arm <= z.sum() <= population.m - min_per_arm:
            return z
    raise AllTreatedOrAllControl(f"fewer than {min_per_arm} cluster(s) in an arm after {max_attempts} draws")


def outcome_mean(population: Population, params: DgpParams = DgpParams()) -> np.ndarray:
    """Noise-free control outcome for every unit."""
    P = population.W[:, CLUSTER_NAMES.index("pct_proficient")][population.cluster]
    return (params.intercept + params.coef_read * population.X[:, 0]
            + params.coef_math * population.X[:, 1] + params.coef_proficient * P)


def true_effect(population: Population, tau_mult: float, params: DgpParams = DgpParams()) -> float:
    """``tau_mult`` times the sd of the noise-free control outcome."""
    return tau_mult * float(outcome_mean(population, params).std())


def generate_outcomes(population: Population, treatment, rng: np.random.Generator, tau_mult: float = 0.3,
                      noise_sd: float = 12.0, params: DgpParams = DgpParams()):
    """Observed outcomes ``Z y1 + (1 - Z) y0``; returns ``(y, y0, tau)``."""
    share = params.cluster_noise_share
    school = math.sqrt(share) * noise_sd * rng.standard_normal(population.m)
    student = math.sqrt(1.0 - share) * noise_sd * rng.standard_normal(population.n)
    y0 = outcome_mean(population, params) + school[population.cluster] + student
    tau = true_effect(population, tau_mult, params)
    z = np.asarray(treatment, bool)[population.cluster]
    return y0 + tau * z, y0, tau


@dataclass(frozen=True)
class SimConfig:
    overlap_c: tuple[float, ...] = (1.0, 2.5, 7.5, 10.0)
    n_clusters: tuple[int, ...] = (44,)
    n_reps: int = 200
    seed: int = 20240101
    mean_cluster_size: int = 78
    tau_sd_multiplier: float = 0.3
    noise_sd: float = 12.0
    estimators: tuple[str, ...] = ESTIMATORS
    variance_estimators: tuple[str, ...] = ("plugin", "sandwich")
    alpha: float = 0.05
    cluster_sampling: str = "generate"  # or "resample"
    base_clusters: int = 44
    treated_variance: bool = True  # coverage is judged against tau, so mu1 noise counts
    crossfit_folds: int = 5  # cluster folds for plug-in residuals; 0 = in-sample
    threads: int = 1
    params: DgpParams = DgpParams()

    def __post_init__(self):
        object.__setattr__(self, "overlap_c", tuple(float(c) for c in np.atleast_1d(self.overlap_c)))
        object.__setattr__(self, "n_clusters", tuple(int(k) for k in np.atleast_1d(self.n_clusters)))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "variance_estimators", tuple(self.variance_estimators))
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        if any(c <= 0 for c in self.overlap_c):
            raise ValueError("overlap_c values must be positive")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")
        if self.cluster_sampling not in ("generate", "resample"):
            raise ValueError("cluster_sampling must be 'generate' or 'resample'")

    def scenarios(self) -> list[tuple[float, int]]:
        return [(c, k) for k in self.n_clusters for c in self.overlap_c]


@dataclass
class SimResult:
    summary: pd.DataFrame  # one row per (c, n_clusters, estimator)
    replications: pd.DataFrame  # one row per (c, n_clusters, rep, estimator)
    icc: pd.DataFrame  # per (c, n_clusters, rep): realized noise ICC and the fitted hyperparameter
    failures: pd.DataFrame
    config: SimConfig = field(repr=False, default=None)

    def long(self) -> pd.DataFrame:
        """One row per (scenario, estimator, metric)."""
        s = self.summary.melt(id_vars=["c", "n_clusters", "estimator"], var_name="metric", value_name="value")
        return s.sort_values(["n_clusters", "c", "estimator", "metric"], kind="stable").reset_index(drop=True)

    def icc_summary(self) -> pd.DataFrame:
        return (self.icc.groupby(["n_clusters", "c"], sort=True)[["icc_realized", "icc_hyper"]]
                .agg(["mean", "std"]).reset_index())


def _scenario_key(c: float, k: int) -> tuple[int, int]:
    return int(round(c * 1000)), int(k)


def _replication(args) -> dict:
    config, c, k, rep, base = args
    ss = np.random.SeedSequence(config.seed, spawn_key=(*_scenario_key(c, k), rep))
    pop_ss, trt_ss, out_ss = ss.spawn(3)
    params = config.params
    if config.cluster_sampling == "resample":
        idx = np.random.default_rng(pop_ss).integers(0, base.m, size=k)
        pop = base.select(idx)
    else:
        pop = generate_base_population(pop_ss, k, config.mean_cluster_size, params)
    # two controls per arm keep the random-intercept fit and variances defined
    z = assign_treatment(pop, c, np.random.default_rng(trt_ss), min_per_arm=2)
    y, y0, tau = generate_outcomes(pop, z, np.random.default_rng(out_ss), config.tau_sd_multiplier,
                                   config.noise_sd, params)
    ds = pop.to_dataset(z, y)
    icc_realized = _realized_icc(y0 - outcome_mean(pop, params), pop.cluster)
    ctrl = ~ds.unit_treated
    rows = []
    record = {"sd_control": float(ds.y[ctrl].std(ddof=1)), "tau": tau, "n": ds.n, "n1": ds.n1,
              "m1": int(ds.treated.sum())}
    if "naive" in config.estimators:
        rows.append({"estimator": "naive", "estimate": float(ds.y[~ctrl].mean() - ds.y[ctrl].mean())})
    feats = build_features(ds, FeatureSpec(include_unit=True))
    icc = None
    for name, mode in (("balancing", Mode.UNIT), ("subset_weights", Mode.SUBSET)):
        if name not in config.estimators:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sol = fit(ds, feats, BalanceSpec(mode=mode))
            est = estimate(ds, sol, alpha=config.alpha, include_treated_variance=config.treated_variance,
                           crossfit_folds=config.crossfit_folds)
        icc = sol.hyper.icc
        rows.append({
            "estimator": name, "estimate": est.point, "estimate_bc": est.point_bias_corrected,
            "se_plugin": est.se_plugin, "se_sandwich": est.se_sandwich,
            "lo_plugin": est.ci_plugin[0], "hi_plugin": est.ci_plugin[1],
            "lo_sandwich": est.ci_sandwich[0], "hi_sandwich": est.ci_sandwich[1],
            "ess_control": est.ess_control, "converged": sol.converged,
            "noise_to_signal": sol.hyper.noise_to_signal,
        })
    for r in rows:
        r.update(record)
    return {"rows": rows, "icc": icc, "icc_realized": icc_realized, "tau": tau}


def _realized_icc(resid: np.ndarray, cluster: np.ndarray) -> float:
    vc, vu = anova_components(resid, cluster)
    return vc / (vc + vu) if vc + vu > 0 else 0.0


def _summarize(reps: pd.DataFrame, variance_estimators) -> pd.DataFrame:
    out = []
    for (k, c, name), g in reps.groupby(["n_clusters", "c", "estimator"], sort=True):
        err = g["estimate"] - g["tau"]
        sd = float(g["sd_control"].mean())
        row = {
            "c": c, "n_clusters": k, "estimator": name, "n_reps": len(g),
            "bias": float(err.mean()), "rmse": float(np.sqrt(np.mean(err ** 2))),
            "std_bias": float(err.mean()) / sd, "std_rmse": float(np.sqrt(np.mean(err ** 2))) / sd,
        }
        for v in variance_estimators:
            if f"se_{v}" in g and g[f"se_{v}"].notna().any():
                lo, hi = g[f"lo_{v}"], g[f"hi_{v}"]
                row[f"mean_se_{v}"] = float(g[f"se_{v}"].mean())
                row[f"ci_length_{v}"] = float((hi - lo).mean())
                row[f"coverage_{v}"] = float(((lo <= g["tau"]) & (g["tau"] <= hi)).mean())
            else:
                row[f"mean_se_{v}"] = row[f"ci_length_{v}"] = row[f"coverage_{v}"] = float("nan")
        out.append(row)
    return pd.DataFrame(out)


def run_study(config: SimConfig) -> SimResult:
    """Run every scenario of ``config`` and aggregate bias, RMSE, SE and coverage."""
    base = None
    if config.cluster_sampling == "resample":
        base = generate_base_population(np.random.SeedSequence(config.seed, spawn_key=(0,)),
                                        config.base_clusters, config.mean_cluster_size, config.params)
    tasks = [(config, c, k, rep, base) for c, k in config.scenarios() for rep in range(config.n_reps)]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_safe_replication, tasks, chunksize=4))
    else:
        results = [_safe_replication(t) for t in tasks]

    rep_rows, icc_rows, failures = [], [], []
    for (_, c, k, rep, _), res in zip(tasks, results):
        if "error" in res:
            failures.append({"c": c, "n_clusters": k, "rep": rep, "error": res["error"]})
            continue
        for r in res["rows"]:
            rep_rows.append({"c": c, "n_clusters": k, "rep": rep, **r})
        icc_rows.append({"c": c, "n_clusters": k, "rep": rep, "icc_realized": res["icc_realized"],
                         "icc_hyper": res["icc"]})
    reps = pd.DataFrame(rep_rows)
    summary = _summarize(reps, config.variance_estimators) if len(reps) else pd.DataFrame()
    return SimResult(
        summary=summary,
        replications=reps,
        icc=pd.DataFrame(icc_rows, columns=["c", "n_clusters", "rep", "icc_realized", "icc_hyper"]),
        failures=pd.DataFrame(failures, columns=["c", "n_clusters", "rep", "error"]),
        config=config,
    )


def _safe_replication(args) -> dict:
    try:
        return _replication(args)
    except Exception as exc:  # recorded per replication, never fatal
        logger.warning("replication %s failed: %s", args[1:4], exc)
        return {"error": f"{type(exc).__name__}: {exc}"}


def config_dict(config: SimConfig) -> dict:
    d = asdict(config)
    d["params"] = asdict(config.params)
    return d


def with_overrides(config: SimConfig, **kw) -> SimConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
