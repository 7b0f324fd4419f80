"""Command-line front end.

Three subcommands, all driven by a single JSON config document:

  estimate --config c.json --input data.csv --out dir/
  simulate --config c.json --out dir/
  coverage --config c.json --out dir/

Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 numerical
failures. The environment variable MC_SEED overrides the config seed. Every
output embeds the fully resolved config and seed, so re-running from an
output's embedded config reproduces it bit-for-bit.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .bootstrap import (
    IID_BOOT,
    MULTIWAY_BOOT,
    band_to_csv_rows,
    band_to_json_dict,
    iid_band,
    pointwise_band,
    uniform_band,
)
from .data import Mode, load_csv, quantile_grid, write_csv
from .errors import CausalBandsError, ConfigError, exit_code_for
from .estimator import (
    blockwise_variant,
    cluster_covariance,
    fit_cross_fitted,
    fit_full_sample,
    iid_covariance,
    summary_lines,
)
from .nuisance import NuisanceConfig
from .rng import derive_seed
from .sieve import basis_for_values
from .simulation import (
    CROSS_FIT,
    FULL_SAMPLE,
    POINTWISE,
    DgpConfigCATE,
    DgpConfigCTE,
    EstimatorConfig,
    run_coverage,
    simulate_cate,
    simulate_cte,
)

_GRID_DEFAULTS = {Mode.CATE: (0.01, 0.99), Mode.CTE: (0.20, 0.80)}
_METHODS = (POINTWISE, IID_BOOT, MULTIWAY_BOOT)
_BAND_SEED_STREAM = {FULL_SAMPLE: 11, CROSS_FIT: 12}
_METHOD_SEED_STREAM = {IID_BOOT: 21, MULTIWAY_BOOT: 22}


def _fail(field: str, message: str) -> ConfigError:
    return ConfigError(f"config field {field!r}: {message}")


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate cross-field consistency."""
    cfg = dict(raw)
    mode = cfg.get("mode", "cate")
    if mode not in ("cate", "cte"):
        raise _fail("mode", f"must be 'cate' or 'cte', got {mode!r}")
    estimator = cfg.get("estimator", "crossfit")
    if estimator not in ("full", "crossfit", "both"):
        raise _fail("estimator", f"must be 'full', 'crossfit', or 'both', got {estimator!r}")
    k_folds = int(cfg.get("k_folds", 2))
    if estimator in ("crossfit", "both") and k_folds < 2:
        raise _fail("k_folds", "cross-fitting needs K >= 2")

    basis = {"family": "polynomial", "p": 4, "degree": 3}
    basis.update(cfg.get("basis", {}))
    if basis["p"] < 1:
        raise _fail("basis.p", "must be >= 1")

    nuisance = {
        "trim": 0.01, "ridge": 0.0, "density_floor": 0.05,
        "bandwidth_rule": "silverman", "kernel": "gaussian", "cte_poly_order": 2,
        "max_iter": 100, "tol": 1e-8, "small_arm_fallback": True,
    }
    nuisance.update(cfg.get("nuisance", {}))
    if not 0.0 < float(nuisance["trim"]) < 0.5:
        raise _fail("nuisance.trim", "must lie in (0, 0.5)")
    if float(nuisance["density_floor"]) <= 0.0:
        raise _fail("nuisance.density_floor", "must be positive")

    bootstrap = {"draws": 500, "alpha": 0.05, "methods": list(_METHODS),
                 "band_variance_mode": "pooled", "crossfit_gram": "pooled"}
    bootstrap.update(cfg.get("bootstrap", {}))
    if int(bootstrap["draws"]) < 100:
        raise _fail("bootstrap.draws", "must be at least 100")
    if not 0.0 < float(bootstrap["alpha"]) < 1.0:
        raise _fail("bootstrap.alpha", "must lie in (0, 1)")
    for m in bootstrap["methods"]:
        if m not in _METHODS:
            raise _fail("bootstrap.methods", f"unknown method {m!r}; options {list(_METHODS)}")
    if bootstrap["band_variance_mode"] not in ("pooled", "blockwise"):
        raise _fail("bootstrap.band_variance_mode", "must be 'pooled' or 'blockwise'")
    if bootstrap["crossfit_gram"] not in ("pooled", "per_block"):
        raise _fail("bootstrap.crossfit_gram", "must be 'pooled' or 'per_block'")

    lo, hi = _GRID_DEFAULTS[Mode(mode)]
    grid = {"lo": lo, "hi": hi, "count": 100}
    grid.update(cfg.get("grid", {}))
    if not 0.0 <= float(grid["lo"]) < float(grid["hi"]) <= 1.0:
        raise _fail("grid", f"need 0 <= lo < hi <= 1, got {grid}")
    if int(grid["count"]) < 1:
        raise _fail("grid.count", "must be >= 1")

    dgp = {
        "n_rows": 25, "n_cols": 25, "dim": 4, "rho": 0.25,
        "weights_w": [0.4, 0.4], "weights_eps": [0.4, 0.4], "weights_v": [0.4, 0.4],
        "shape": "x", "component_noise": 0.1, "noise_is_variance": True,
        "treatment_noise": "uniform", "treatment_noise_center": 0.0,
        "standardize_covariates": False,
    }
    dgp.update(cfg.get("dgp", {}))

    seed = int(os.environ.get("MC_SEED", cfg.get("seed", 20240501)))
    replications = int(cfg.get("replications", 500))
    if replications < 1:
        raise _fail("replications", "must be >= 1")
    workers = int(cfg.get("workers", 1))
    if workers < 1:
        raise _fail("workers", "must be >= 1")

    return {
        "mode": mode,
        "estimator": estimator,
        "k_folds": k_folds,
        "basis": basis,
        "nuisance": nuisance,
        "bootstrap": bootstrap,
        "grid": grid,
        "dgp": dgp,
        "seed": seed,
        "replications": replications,
        "workers": workers,
        "skip_failures": bool(cfg.get("skip_failures", False)),
    }


def _nuisance_config(resolved: dict) -> NuisanceConfig:
    n = resolved["nuisance"]
    try:
        return NuisanceConfig(
            trim=float(n["trim"]),
            ridge=float(n["ridge"]),
            density_floor=float(n["density_floor"]),
            bandwidth_rule=n["bandwidth_rule"],
            kernel=n["kernel"],
            cte_poly_order=int(n["cte_poly_order"]),
            max_iter=int(n["max_iter"]),
            tol=float(n["tol"]),
            small_arm_fallback=bool(n["small_arm_fallback"]),
        )
    except ValueError as exc:
        raise _fail("nuisance", str(exc)) from None


def _dgp_config(resolved: dict):
    d = resolved["dgp"]
    common = dict(
        n_rows=int(d["n_rows"]), n_cols=int(d["n_cols"]), dim=int(d["dim"]),
        rho=float(d["rho"]),
        weights_w=tuple(d["weights_w"]), weights_eps=tuple(d["weights_eps"]),
        component_noise=float(d["component_noise"]),
        noise_is_variance=bool(d["noise_is_variance"]),
        standardize_covariates=bool(d["standardize_covariates"]),
        zeta=tuple(d["zeta"]) if d.get("zeta") else None,
    )
    try:
        if resolved["mode"] == "cate":
            return DgpConfigCATE(
                mu1=d["shape"],
                weights_v=tuple(d["weights_v"]),
                treatment_noise=d["treatment_noise"],
                treatment_noise_center=float(d["treatment_noise_center"]),
                **common,
            )
        return DgpConfigCTE(
            g=d["shape"],
            gamma=tuple(d["gamma"]) if d.get("gamma") else None,
            **common,
        )
    except (ValueError, CausalBandsError) as exc:
        raise _fail("dgp", str(exc)) from None


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_rows(path: Path, rows: list[list[str]]) -> None:
    path.write_text("\n".join(",".join(rec) for rec in rows) + "\n", encoding="utf-8")


def cmd_estimate(resolved: dict, input_path: str, out_dir: Path) -> int:
    mode = Mode(resolved["mode"])
    sample = load_csv(input_path, mode)
    seed = resolved["seed"]
    nuis = _nuisance_config(resolved)
    basis = basis_for_values(resolved["basis"]["family"], int(resolved["basis"]["p"]),
                             sample.conditioning_values.ravel(),
                             degree=int(resolved["basis"]["degree"]))
    estimator = resolved["estimator"]
    if estimator == "both":
        raise _fail("estimator", "'both' is only valid for the coverage command")
    if estimator == "full":
        fit = fit_full_sample(sample, basis, nuis)
        cov = cluster_covariance(fit)
        est_key = FULL_SAMPLE
    else:
        k = resolved["k_folds"]
        if k > sample.effective_size:
            raise _fail("k_folds", f"K={k} exceeds min(N, M)={sample.effective_size}")
        result = fit_cross_fitted(sample, basis, nuis, k, derive_seed(seed, 2),
                                  gram_mode=resolved["bootstrap"]["crossfit_gram"])
        if resolved["bootstrap"]["band_variance_mode"] == "blockwise":
            fit, cov = blockwise_variant(result)
        else:
            fit = result.averaged
            cov = cluster_covariance(fit)
        est_key = CROSS_FIT

    g = resolved["grid"]
    grid = quantile_grid(sample.conditioning_values.ravel(), float(g["lo"]), float(g["hi"]),
                         int(g["count"]))
    alpha = float(resolved["bootstrap"]["alpha"])
    draws = int(resolved["bootstrap"]["draws"])
    bands = {}
    for method in resolved["bootstrap"]["methods"]:
        if method == POINTWISE:
            bands[method] = pointwise_band(fit, cov, grid, alpha)
        elif method == MULTIWAY_BOOT:
            bseed = derive_seed(seed, _BAND_SEED_STREAM[est_key], _METHOD_SEED_STREAM[method])
            bands[method] = uniform_band(fit, cov, grid, alpha, draws, bseed,
                                         workers=resolved["workers"])
        else:
            bseed = derive_seed(seed, _BAND_SEED_STREAM[est_key], _METHOD_SEED_STREAM[method])
            bands[method] = iid_band(fit, iid_covariance(fit), grid, alpha, draws, bseed,
                                     workers=resolved["workers"])

    rows = [["method", "x", "tau_hat", "se", "lower", "upper"]]
    for method in resolved["bootstrap"]["methods"]:
        for rec in band_to_csv_rows(bands[method])[1:]:
            rows.append([method] + rec)
    _write_rows(out_dir / "bands.csv", rows)
    _write_json(out_dir / "fit.json", {
        "estimator": est_key,
        "beta": [float(b) for b in fit.beta],
        "gram_trace": float(np.trace(fit.gram.matrix)),
        "ridge_used": fit.ridge_used,
        "ridge_fallback": fit.ridge_fallback,
        "scale_n": fit.scale_n,
        "critical_values": {m: bands[m].critical_value for m in bands},
        "bands": {m: band_to_json_dict(bands[m]) for m in bands},
        "summary": summary_lines(fit),
        "config": resolved,
        "seed": seed,
    })
    return 0


def cmd_simulate(resolved: dict, out_dir: Path) -> int:
    dgp = _dgp_config(resolved)
    seed = resolved["seed"]
    if resolved["mode"] == "cate":
        sample, _ = simulate_cate(dgp, seed)
        true_params = {"zeta": list(dgp.zeta), "shape": dgp.mu1}
        convention = "tau(x) = mu1(x) - x with x the first covariate coordinate"
    else:
        sample, _ = simulate_cte(dgp, seed)
        true_params = {"zeta": list(dgp.zeta), "gamma": list(dgp.gamma), "shape": dgp.g}
        convention = "tau(x) = g(x); covariate components are mean zero"
    write_csv(sample, out_dir / "sample.csv")
    _write_json(out_dir / "sample_meta.json", {
        "tau_shape": resolved["dgp"]["shape"],
        "tau_convention": convention,
        "true_params": true_params,
        "config": resolved,
        "seed": seed,
    })
    return 0


def cmd_coverage(resolved: dict, out_dir: Path) -> int:
    dgp = _dgp_config(resolved)
    estimators = {"full": (FULL_SAMPLE,), "crossfit": (CROSS_FIT,),
                  "both": (FULL_SAMPLE, CROSS_FIT)}[resolved["estimator"]]
    try:
        est_cfg = EstimatorConfig(
            estimators=estimators,
            methods=tuple(resolved["bootstrap"]["methods"]),
            k_folds=resolved["k_folds"],
            basis_family=resolved["basis"]["family"],
            basis_dimension=int(resolved["basis"]["p"]),
            basis_degree=int(resolved["basis"]["degree"]),
            nuisance=_nuisance_config(resolved),
            band_variance_mode=resolved["bootstrap"]["band_variance_mode"],
            crossfit_gram=resolved["bootstrap"]["crossfit_gram"],
        )
    except ValueError as exc:
        raise _fail("estimator", str(exc)) from None
    g = resolved["grid"]
    report = run_coverage(
        dgp,
        est_cfg,
        replications=resolved["replications"],
        draws=int(resolved["bootstrap"]["draws"]),
        alpha=float(resolved["bootstrap"]["alpha"]),
        grid_lo=float(g["lo"]),
        grid_hi=float(g["hi"]),
        grid_count=int(g["count"]),
        seed=resolved["seed"],
        workers=resolved["workers"],
        skip_failures=resolved["skip_failures"],
        config_echo=resolved,
    )
    _write_json(out_dir / "coverage.json", report.to_json_dict())
    (out_dir / "coverage.tsv").write_text(
        "\n".join(report.to_tsv_lines(resolved["dgp"]["shape"])) + "\n", encoding="utf-8"
    )
    print(f"coverage run finished in {report.runtime_seconds:.1f}s "
          f"({report.completed}/{report.replications} replications)", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causalbands",
        description="Causal-function estimation and uniform bands under two-way clustering",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_input in (("estimate", True), ("simulate", False), ("coverage", False)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config document")
        if needs_input:
            p.add_argument("--input", required=True, help="input CSV")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=None, help="parallel workers override")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config!r}: {exc}") from None
        resolved = resolve_config(raw)
        if args.workers is not None:
            if args.workers < 1:
                raise _fail("workers", "must be >= 1")
            resolved["workers"] = args.workers
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        if args.command == "estimate":
            code = cmd_estimate(resolved, args.input, out_dir)
        elif args.command == "simulate":
            code = cmd_simulate(resolved, out_dir)
        else:
            code = cmd_coverage(resolved, out_dir)
        print(f"{args.command} wrote {out_dir} in {time.perf_counter() - t0:.1f}s",
              file=sys.stderr)
        return code
    except CausalBandsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
