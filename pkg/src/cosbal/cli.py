"""Command-line front end.

Every command reads one YAML config; flags override individual keys. Outputs
go to ``--out`` (default ``output.dir`` of the config, else ``.``) together
with ``manifest.json`` recording the resolved config, its hash, the seed and
the package version. Exit codes: 0 success, 1 config or input error, 2 the
solver did not converge (outputs are still written and flagged).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .balancer import BalanceSpec, Mode, fit
from .data import DatasetError
from .diagnostics import format_table, standardized_differences, weight_summary
from .estimator import estimate
from .hyperparams import HyperParams, TooFewClusters
from .ingest import IngestError, SchemaConfig, load_dataset
from .qp import InfeasibleConstraint
from .simulator import DgpParams, SimConfig, config_dict, run_study
from .transform import FeatureSpec, FeatureSpecError

THREADS_ENV = "COSBAL_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED = 0, 1, 2

logger = logging.getLogger("cosbal")


class ConfigError(ValueError):
    pass


# key -> (default, help); the single source for --help text and describe-config
REFERENCE: dict[str, dict[str, tuple[object, str]]] = {
    "data": {
        "unit_file": (None, "CSV with one row per unit (header required)"),
        "cluster_file": (None, "optional CSV with one row per cluster"),
        "unit_id_column": (None, "unit identifier column"),
        "cluster_id_column": (None, "cluster identifier column (both files)"),
        "treatment_column": (None, "0/1 cluster treatment, in the unit or cluster file"),
        "outcome_column": (None, "outcome column in the unit file"),
        "unit_covariates": ([], "unit-level covariate columns"),
        "cluster_covariates": ([], "cluster-level covariate columns (cluster file)"),
        "aggregate_unit_covariates": ([], "list of {column, aggregator: mean|proportion} cluster summaries"),
        "categorical_unit_covariates": ([], "unit columns one-hot expanded into level indicators"),
        "categorical_cluster_covariates": ([], "cluster columns one-hot expanded into level indicators"),
    },
    "features": {
        "include_unit": (True, "balance unit covariates and interactions (false: cluster covariates only)"),
        "standardize": (True, "scale features to mean 0, sd 1"),
        "interactions": ([], "list of [cluster_covariate, unit_covariate] products"),
        "polynomial_degree": (1, "1 or 2 (adds squares and pairwise products)"),
    },
    "balance": {
        "mode": ("unit", "unit | cluster_only | subset"),
    },
    "hyperparams": {
        "mode": ("heuristic", "heuristic (random-intercept fit) | manual (icc and noise_to_signal below)"),
        "icc": (None, "penalty ICC in [0, 1] for manual mode"),
        "noise_to_signal": (None, "penalty scale >= 0 for manual mode"),
        "fit_side": ("control_only", "units used for the heuristic fit: control_only | pooled"),
        "signal": ("norm", "signal measure: norm (||beta||^2) | squared_sum ((sum beta)^2)"),
        "holdout_fraction": (0.0, "fraction of clusters used for the heuristic fit (0: all)"),
    },
    "solver": {
        "max_iter": (10000, "iteration limit"),
        "tol": (1e-8, "projected-gradient tolerance"),
        "lower_bound": (0.0, "lower bound on each weight"),
        "upper_bound": (None, "upper bound on each weight (unset: none)"),
    },
    "estimate": {
        "alpha": (0.05, "1 - confidence level"),
        "estimand": (None, "att | ato; unset: implied by balance.mode"),
        "ridge_lambda": (None, "outcome-model ridge penalty (unset: 1e-3 trace(F'F)/d)"),
        "include_treated_variance": (False, "add treated-cluster noise to the ATT variances"),
        "crossfit_folds": (5, "cluster folds for plug-in residuals (0: in-sample)"),
        "bias_correct": (True, "report the outcome-model bias-corrected estimate"),
    },
    "simulate": {
        "overlap_c": ([1.0, 2.5, 7.5, 10.0], "overlap constants c"),
        "n_clusters": ([44], "cluster counts"),
        "n_reps": (200, "replications per scenario"),
        "seed": (20240101, "root seed"),
        "mean_cluster_size": (78, "Poisson mean cluster size"),
        "tau_sd_multiplier": (0.3, "true effect in sd units of the noise-free outcome"),
        "noise_sd": (12.0, "total sd of the outcome noise"),
        "estimators": (["naive", "balancing", "subset_weights"], "estimators to run"),
        "variance_estimators": (["plugin", "sandwich"], "variance estimators to summarize"),
        "alpha": (0.05, "1 - confidence level"),
        "cluster_sampling": ("generate", "generate | resample (draw clusters from one base population)"),
        "base_clusters": (44, "base population size for resample"),
        "treated_variance": (True, "include treated-cluster noise in the intervals"),
        "crossfit_folds": (5, "cluster folds for plug-in residuals"),
        "threads": (1, f"worker processes (default from ${THREADS_ENV})"),
    },
    "output": {
        "dir": (".", "output directory"),
    },
}


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def load_config(path) -> tuple[dict, Path]:
    if path is None:
        return {}, Path(".")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping of sections")
    unknown = sorted(set(cfg) - set(REFERENCE))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    for section, values in cfg.items():
        if section == "data":
            continue  # validated by SchemaConfig
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        bad = sorted(set(values) - set(REFERENCE[section]))
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {bad}")
    return cfg, path.parent


def _section(cfg: dict, name: str) -> dict:
    out = {k: v[0] for k, v in REFERENCE[name].items()}
    out.update(cfg.get(name) or {})
    return out


def _feature_spec(cfg: dict) -> FeatureSpec:
    f = _section(cfg, "features")
    return FeatureSpec(include_unit=bool(f["include_unit"]), standardize=bool(f["standardize"]),
                       interactions=tuple(tuple(p) for p in f["interactions"]),
                       polynomial_degree=int(f["polynomial_degree"]))


def _balance_spec(cfg: dict) -> BalanceSpec:
    b, h, sv = _section(cfg, "balance"), _section(cfg, "hyperparams"), _section(cfg, "solver")
    try:
        mode = Mode(b["mode"])
    except ValueError:
        raise ConfigError(f"unknown mode {b['mode']!r}") from None
    hyper = None
    if h["mode"] == "manual":
        if h["icc"] is None or h["noise_to_signal"] is None:
            raise ConfigError("manual hyperparams need both icc and noise_to_signal")
        hyper = HyperParams(icc=float(h["icc"]), noise_to_signal=float(h["noise_to_signal"]))
    elif h["mode"] != "heuristic":
        raise ConfigError(f"unknown hyperparams mode {h['mode']!r}")
    return BalanceSpec(mode=mode, hyper=hyper, lower=float(sv["lower_bound"]),
                       upper=np.inf if sv["upper_bound"] is None else float(sv["upper_bound"]),
                       max_iter=int(sv["max_iter"]), tol=float(sv["tol"]), hyper_side=h["fit_side"],
                       hyper_signal=h["signal"], hyper_holdout=float(h["holdout_fraction"]))


def _apply_overrides(cfg: dict, args) -> dict:
    cfg = {k: dict(v) if isinstance(v, dict) else v for k, v in cfg.items()}
    for sec, key, attr in (("balance", "mode", "mode"), ("hyperparams", "icc", "icc"),
                           ("hyperparams", "noise_to_signal", "noise_to_signal"),
                           ("estimate", "alpha", "alpha"), ("estimate", "estimand", "estimand"),
                           ("output", "dir", "out")):
        val = getattr(args, attr, None)
        if val is not None:
            cfg.setdefault(sec, {})[key] = val
    if getattr(args, "icc", None) is not None or getattr(args, "noise_to_signal", None) is not None:
        cfg["hyperparams"]["mode"] = "manual"
    return cfg


def _fit_from_config(cfg: dict, base: Path):
    if "data" not in cfg:
        raise ConfigError("config has no 'data' section")
    schema = SchemaConfig.from_dict(cfg["data"], base_dir=base)
    ds = load_dataset(schema)
    fspec = _feature_spec(cfg)
    bspec = _balance_spec(cfg)
    if bspec.mode is Mode.CLUSTER_ONLY and fspec.include_unit:
        raise ConfigError("mode cluster_only requires features.include_unit: false")
    sol = fit(ds, fspec, bspec)
    return ds, sol


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def _write_manifest(out: Path, command: str, cfg: dict, seed, outputs: list[Path], extra=None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_hash": _hash(cfg),
        "seed": seed,
        "outputs": {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in outputs},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _weights_frame(ds, sol) -> pd.DataFrame:
    return pd.DataFrame({
        "unit_id": ds.unit_ids, "cluster_id": np.asarray(ds.cluster_ids, dtype=object)[ds.cluster],
        "treated": ds.unit_treated.astype(int), "weight": sol.weights,
    })


def _outdir(cfg: dict) -> Path:
    out = Path(_section(cfg, "output")["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _solver_meta(sol) -> dict:
    return {"converged": bool(sol.converged), "iterations": int(sol.solution_meta.iterations),
            "kkt_residual": float(sol.solution_meta.kkt_residual),
            "icc": sol.hyper.icc, "noise_to_signal": sol.hyper.noise_to_signal,
            "hyper_source": sol.hyper.source.value}


def cmd_weights(args) -> int:
    cfg, base = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    ds, sol = _fit_from_config(cfg, base)
    out = _outdir(cfg)
    paths = [out / "weights.csv", out / "balance.csv", out / "weight_summary.json"]
    _write_csv(_weights_frame(ds, sol), paths[0])
    _write_csv(standardized_differences(ds, sol.weights), paths[1])
    summary = {"control": weight_summary(sol.control_weights), "solver": _solver_meta(sol)}
    if sol.mode is Mode.SUBSET:
        summary["treated"] = weight_summary(sol.treated_weights)
    paths[2].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "weights", cfg, None, paths, {"converged": bool(sol.converged)})
    print(f"mode {sol.mode.value}: {ds.n0} control units, ESS {sol.ess_control:.1f}, "
          f"icc {sol.hyper.icc:.3f}, noise_to_signal {sol.hyper.noise_to_signal:.4g}")
    print(format_table(standardized_differences(ds, sol.weights)))
    if not sol.converged:
        print("WARNING: solver did not converge; outputs flagged", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_balance(args) -> int:
    cfg, base = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    ds, sol = _fit_from_config(cfg, base)
    out = _outdir(cfg)
    table = standardized_differences(ds, sol.weights)
    path = out / "balance.csv"
    _write_csv(table, path)
    _write_manifest(out, "balance", cfg, None, [path], {"converged": bool(sol.converged)})
    print(format_table(table))
    return EXIT_OK if sol.converged else EXIT_NONCONVERGED


def cmd_estimate(args) -> int:
    cfg, base = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    e = _section(cfg, "estimate")
    mode = Mode(_section(cfg, "balance")["mode"])
    if e["estimand"] is not None:
        if e["estimand"] not in ("att", "ato"):
            raise ConfigError(f"unknown estimand {e['estimand']!r}")
        if (e["estimand"] == "ato") != (mode is Mode.SUBSET):
            raise ConfigError(f"estimand {e['estimand']} requires mode "
                              f"{'subset' if e['estimand'] == 'ato' else 'unit or cluster_only'}")
    ds, sol = _fit_from_config(cfg, base)
    est = estimate(ds, sol, alpha=float(e["alpha"]), ridge_lambda=e["ridge_lambda"],
                   include_treated_variance=bool(e["include_treated_variance"]),
                   bias_correct=bool(e["bias_correct"]), crossfit_folds=int(e["crossfit_folds"]))
    row = {
        "estimand": est.estimand.value, "point": est.point, "point_bias_corrected": est.point_bias_corrected,
        "var_plugin": est.var_plugin, "var_sandwich": est.var_sandwich,
        "se_plugin": est.se_plugin, "se_sandwich": est.se_sandwich,
        "ci_plugin_lo": est.ci_plugin[0], "ci_plugin_hi": est.ci_plugin[1],
        "ci_sandwich_lo": est.ci_sandwich[0], "ci_sandwich_hi": est.ci_sandwich[1],
        "alpha": est.alpha, "ess_control": est.ess_control, "ess_treated": est.ess_treated,
        "design_effect": est.design_effect, "imbalance_norm": est.imbalance_norm,
        "icc": sol.hyper.icc, "noise_to_signal": sol.hyper.noise_to_signal, "converged": sol.converged,
    }
    out = _outdir(cfg)
    paths = [out / "estimate.csv", out / "weights.csv"]
    _write_csv(pd.DataFrame([row]), paths[0])
    _write_csv(_weights_frame(ds, sol), paths[1])
    _write_manifest(out, "estimate", cfg, None, paths, {"converged": bool(sol.converged)})
    width = max(len(k) for k in row)
    for k, v in row.items():
        print(f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    return EXIT_OK if sol.converged else EXIT_NONCONVERGED


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def simulation_config(cfg: dict, args=None) -> SimConfig:
    s = _section(cfg, "simulate")
    # precedence: flag, config, environment, 1
    s["threads"] = int((cfg.get("simulate") or {}).get("threads") or os.environ.get(THREADS_ENV) or 1)
    if args is not None:
        for attr, key in (("c", "overlap_c"), ("n_clusters", "n_clusters"), ("reps", "n_reps"),
                          ("seed", "seed"), ("threads", "threads")):
            if getattr(args, attr, None) is not None:
                s[key] = getattr(args, attr)
    try:
        return SimConfig(**s, params=DgpParams())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulate section: {exc}") from None


def cmd_simulate(args) -> int:
    cfg, _ = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    sim = simulation_config(cfg, args)
    result = run_study(sim)
    out = _outdir(cfg)
    resolved = config_dict(sim)
    resolved.pop("threads")  # results do not depend on the worker count
    paths = [out / "results.csv", out / "summary.csv", out / "replications.csv", out / "icc.csv"]
    _write_csv(result.long(), paths[0])
    _write_csv(result.summary, paths[1])
    _write_csv(result.replications, paths[2])
    _write_csv(result.icc, paths[3])
    if len(result.failures):
        paths.append(out / "failures.csv")
        _write_csv(result.failures, paths[-1])
    _write_manifest(out, "simulate", resolved, sim.seed, paths, {"failures": int(len(result.failures))})
    cols = [c for c in ("n_clusters", "c", "estimator", "std_bias", "rmse", "mean_se_plugin",
                        "mean_se_sandwich", "coverage_plugin", "coverage_sandwich") if c in result.summary]
    print(format_table(result.summary[cols]))
    icc = result.icc["icc_realized"]
    print(f"realized residual ICC: mean {icc.mean():.3f}, sd {icc.std():.3f}; failures {len(result.failures)}")
    return EXIT_OK


def describe_config(fmt: str = "yaml") -> str:
    lines = []
    if fmt == "markdown":
        for section, keys in REFERENCE.items():
            lines += [f"### `{section}`", "", "| key | default | meaning |", "|---|---|---|"]
            lines += [f"| `{k}` | `{d!r}` | {h} |" for k, (d, h) in keys.items()]
            lines.append("")
    else:
        for section, keys in REFERENCE.items():
            lines.append(f"{section}:")
            for k, (d, h) in keys.items():
                lines.append(f"  {k}: {json.dumps(d)}  # {h}")
    return "\n".join(lines) + "\n"


def cmd_describe(args) -> int:
    sys.stdout.write(describe_config(args.format))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cosbal", description=__doc__.splitlines()[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML config path")
        sp.add_argument("--out", help="output directory (overrides output.dir)")

    def balance_flags(sp):
        sp.add_argument("--mode", choices=[m.value for m in Mode], help="balancing problem")
        sp.add_argument("--icc", type=float, help="fix the penalty ICC")
        sp.add_argument("--noise-to-signal", dest="noise_to_signal", type=float, help="fix the penalty scale")

    fmt = argparse.ArgumentDefaultsHelpFormatter
    sp = sub.add_parser("weights", help="fit balancing weights", formatter_class=fmt)
    common(sp)
    balance_flags(sp)
    sp.set_defaults(func=cmd_weights)

    sp = sub.add_parser("balance", help="covariate balance table before and after weighting", formatter_class=fmt)
    common(sp)
    balance_flags(sp)
    sp.set_defaults(func=cmd_balance)

    sp = sub.add_parser("estimate", help="effect estimate, variances and intervals", formatter_class=fmt)
    common(sp)
    balance_flags(sp)
    sp.add_argument("--alpha", type=float, help="1 - confidence level (default 0.05)")
    sp.add_argument("--estimand", choices=["att", "ato"], help="att needs unit/cluster_only, ato needs subset")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("simulate", help="run the Monte Carlo study", formatter_class=fmt)
    common(sp, config_required=False)
    sp.add_argument("--c", type=_floats, help="comma-separated overlap constants (default 1,2.5,7.5,10)")
    sp.add_argument("--n-clusters", dest="n_clusters", type=_ints, help="comma-separated cluster counts (default 44)")
    sp.add_argument("--reps", type=int, help="replications per scenario (default 200)")
    sp.add_argument("--seed", type=int, help="root seed (default 20240101)")
    sp.add_argument("--threads", type=int, help=f"worker processes (default ${THREADS_ENV} or 1)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("describe-config", help="print every config key with its default")
    sp.add_argument("--format", choices=["yaml", "markdown"], default="yaml")
    sp.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            return args.func(args)
    except (ConfigError, IngestError, DatasetError, FeatureSpecError, InfeasibleConstraint, TooFewClusters,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
