"""Command-line front end: config-driven estimation, simulation studies, and
placebo inference with file-based outputs.

Structured settings live in a JSON config file; flags cover only paths, the
seed, and verbosity.  Outputs are deterministic for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .estimators import fit_estimator, fit_report
from .exceptions import DataError, SparseScError
from .inference import placebo_variance
from .panel import LagSpec, PanelSchema, PredictorSpec, load_panel
from .simulation import FactorModelConfig, run_study
from .solvers import SolverOptions

_CONFIG_GUIDE = """\
config file reference (JSON; unknown keys are errors):

  common sections
    "solver":      tol, max_iter, kkt_tol, joint_tol, joint_max_iter,
                   zero_threshold, anchor ("all" | "screen" | index),
                   lambda_grid (list or null), grid_points, grid_lo, grid_hi
    "seed":        integer (CLI --seed overrides; required for
                   simulate/placebo)

  estimate
    "data":        {"path": csv path, "schema": {treated_unit, t0, tv,
                   unit_col, time_col, outcome_col, layout ("long"|"wide"),
                   predictor_cols, unit_order, time_order}}
    "predictors":  {"covariates": [names],
                   "lags": [{"name"?, "offsets": {"0": 1.0}} |
                            {"name"?, "periods": {"1988": 1.0}}],
                   "drop_zero_variance": false}
    "estimators":  any of "sparse", "scm_cv", "scm_fixed", "did"

  simulate
    "study":       n_units, n_periods, t0, tv, n_useful, n_nuisance,
                   n_factors, group_size, ar_coef, noise_sd, intercept,
                   useful_coef, n_lags, covariate_noise
    "estimators":  as above
    "replications": integer
    "workers":     integer (default: all cores, capped by SPARSE_SC_THREADS)

  placebo
    "data", "predictors", "solver" as for estimate
    "estimator":   one of "sparse", "scm_cv", "scm_fixed", "did"
    "draws":       integer
    "with_replacement": bool (default true)
    "bias_corrected":   bool (default false)
    "workers":     integer
"""


def _fail(message: str) -> None:
    raise DataError(message)


def _require_keys(raw: dict, allowed: set[str], context: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        _fail(f"unknown {context} keys: {sorted(unknown)}")


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError:
        _fail(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        _fail(f"config is not valid JSON: {err}")


def _parse_lag(raw: dict, index: int) -> LagSpec:
    _require_keys(raw, {"name", "offsets", "periods"}, "lag")
    name = raw.get("name")
    if raw.get("offsets") is not None:
        offsets = {int(k): float(v) for k, v in raw["offsets"].items()}
        return LagSpec(name=name or f"y_lag{index}", offsets=offsets)
    if raw.get("periods") is not None:
        periods = {k: float(v) for k, v in raw["periods"].items()}
        return LagSpec(name=name or f"y_at{index}", periods=periods)
    _fail(f"lag #{index}: give offsets or periods")


def _parse_predictors(raw: dict) -> tuple[PredictorSpec, bool]:
    _require_keys(raw, {"covariates", "lags", "drop_zero_variance", "aggregation"},
                  "predictors")
    lags = tuple(
        _parse_lag(entry, i) for i, entry in enumerate(raw.get("lags", []))
    )
    spec = PredictorSpec(
        covariates=tuple(raw.get("covariates", [])),
        lags=lags,
        aggregation=raw.get("aggregation", "mean"),
    )
    return spec, bool(raw.get("drop_zero_variance", False))


def _parse_data(raw: dict):
    _require_keys(raw, {"path", "schema"}, "data")
    if "path" not in raw or "schema" not in raw:
        _fail("data section needs 'path' and 'schema'")
    schema = PanelSchema.from_dict(raw["schema"])
    return load_panel(raw["path"], schema)


def _solver_options(raw: dict | None) -> SolverOptions:
    return SolverOptions.from_dict(raw or {})


def _resolve_seed(config: dict, args, required: bool) -> int | None:
    seed = args.seed if args.seed is not None else config.get("seed")
    if seed is None and required:
        _fail("a seed is required (config 'seed' or --seed)")
    return None if seed is None else int(seed)


def _format_float(value) -> str:
    if value is None:
        return ""
    value = float(value)
    return repr(value)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def _emit(line: str, quiet: bool) -> None:
    if not quiet:
        print(line)


def cmd_estimate(config: dict, args) -> int:
    _require_keys(config, {"data", "predictors", "estimators", "solver", "seed"},
                  "estimate config")
    panel = _parse_data(config.get("data") or _fail("estimate config needs 'data'"))
    spec, _ = _parse_predictors(config.get("predictors", {})) if config.get(
        "predictors") else (None, False)
    opts = _solver_options(config.get("solver"))
    estimators = config.get("estimators") or ["sparse"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    reports = {}
    rows = []
    for name in estimators:
        fit, effect = fit_estimator(name, panel, spec, opts)
        reports[name] = fit_report(fit, effect, panel)
        post_flags = [int(i >= panel.t0) for i in range(panel.n_periods)]
        actual = panel.treated_outcomes()
        for i, time in enumerate(panel.times):
            rows.append([
                name, time, _format_float(actual[i]),
                _format_float(effect.counterfactual[i]),
                _format_float(actual[i] - effect.counterfactual[i]),
                post_flags[i],
            ])

    with open(out / "fit.json", "w", encoding="utf-8") as handle:
        json.dump({"estimators": reports, "seed": config.get("seed")}, handle, indent=2)
    _write_csv(out / "effects.csv",
               ["estimator", "time", "actual", "counterfactual", "gap", "post"], rows)

    lines = [f"{'estimator':<12} {'att':>12} {'pre_mse':>12} {'val_mse':>12} "
             f"{'lambda':>12} {'k_used':>7}"]
    for name in estimators:
        rep = reports[name]
        diag = rep.get("diagnostics", {})
        lam = rep.get("lambda_star")
        lines.append(
            f"{name:<12} {rep['att']:>12.4f} "
            f"{diag.get('pre_mse', float('nan')):>12.5f} "
            f"{diag.get('val_mse', float('nan')):>12.5f} "
            f"{(f'{lam:.5g}' if lam is not None else '-'):>12} "
            f"{rep['k_used']:>7d}"
        )
    summary = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    _emit(f"estimate: wrote fit.json, effects.csv, summary.txt to {out}", False)
    _emit(summary, args.quiet)
    return 0


def _study_rows(records: list[dict]):
    header = [
        "rep", "estimator", "att", "post_mse", "pre_mad", "useful_mad",
        "oracle_weight_share", "lambda_star", "anchor", "k_used",
        "nuisance_zero_frac", "useful_zero_frac", "nuisance_mass",
        "useful_mass", "mean_abs_tau_post", "bias_bound", "noise_se",
        "predictor_mse", "predictor_mse_vs_oracle", "v_weights",
    ]
    rows = []
    for record in sorted(records, key=lambda r: (r["rep"], r["estimator"])):
        row = []
        for key in header:
            value = record.get(key)
            if key == "v_weights":
                row.append(";".join(repr(float(x)) for x in (value or [])))
            elif isinstance(value, float):
                row.append(_format_float(value))
            else:
                row.append(value)
        rows.append(row)
    return header, rows


def cmd_simulate(config: dict, args) -> int:
    _require_keys(config, {"study", "estimators", "replications", "solver",
                           "seed", "workers"}, "simulate config")
    cfg = FactorModelConfig.from_dict(config.get("study", {}))
    estimators = config.get("estimators") or ["sparse", "scm_cv", "scm_fixed"]
    replications = int(config.get("replications", 1))
    opts = _solver_options(config.get("solver"))
    seed = _resolve_seed(config, args, required=True)
    workers = config.get("workers")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = run_study(cfg, estimators, replications, seed, opts=opts, workers=workers)

    header, rows = _study_rows(result.records)
    _write_csv(out / "study.csv", header, rows)
    payload = {
        "replications": result.replications,
        "seed": result.seed,
        "estimators": estimators,
        "failures": result.failures,
        "summary": result.summary,
    }
    with open(out / "study_summary.json", "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
    _emit(f"simulate: wrote study.csv, study_summary.json to {out}", False)
    if not args.quiet:
        for name, block in result.summary.items():
            post = block.get("post_mse", {})
            share = block.get("oracle_weight_share", {})
            print(f"{name:<12} post_mse={post.get('mean', float('nan')):.5f} "
                  f"oracle_share={share.get('mean', float('nan')):.3f} "
                  f"({block['replications']} reps)")
    return 0


def cmd_placebo(config: dict, args) -> int:
    _require_keys(config, {"data", "predictors", "estimator", "draws", "solver",
                           "seed", "with_replacement", "bias_corrected", "workers"},
                  "placebo config")
    panel = _parse_data(config.get("data") or _fail("placebo config needs 'data'"))
    spec = None
    if config.get("predictors"):
        spec, _ = _parse_predictors(config["predictors"])
    estimator = config.get("estimator", "sparse")
    draws = int(config.get("draws", 100))
    opts = _solver_options(config.get("solver"))
    seed = _resolve_seed(config, args, required=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = placebo_variance(
        panel, estimator, draws, seed, spec=spec, opts=opts,
        with_replacement=bool(config.get("with_replacement", True)),
        bias_corrected=bool(config.get("bias_corrected", False)),
        workers=config.get("workers", 1),
    )
    rows = [
        [i, record["unit"], _format_float(record["tau"])]
        for i, record in enumerate(result.per_draw)
    ]
    _write_csv(out / "placebo.csv", ["draw", "unit", "tau"], rows)
    payload = {
        "estimator": estimator,
        "draws": result.draws,
        "seed": seed,
        "variance": result.variance,
        "sd": result.sd,
        "bias_corrected": result.bias_corrected,
    }
    with open(out / "placebo_summary.json", "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
    _emit(f"placebo: wrote placebo.csv, placebo_summary.json to {out}", False)
    _emit(f"{estimator}: sd={result.sd:.4f} over {result.draws} draws", args.quiet)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-sc",
        description="Sparse synthetic control estimation, simulation studies, "
                    "and placebo inference.",
        epilog=_CONFIG_GUIDE,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("estimate", "fit estimators to a panel CSV and write fit reports"),
        ("simulate", "run a Monte Carlo study of the estimators"),
        ("placebo", "estimate the effect variance by placebo bootstrap"),
    ):
        cmd = sub.add_parser(name, help=doc, epilog=_CONFIG_GUIDE,
                             formatter_class=argparse.RawDescriptionHelpFormatter)
        cmd.add_argument("--config", required=True, help="path to the JSON config")
        cmd.add_argument("--out", default=".", help="output directory")
        cmd.add_argument("--seed", type=int, default=None,
                         help="RNG seed (overrides config)")
        cmd.add_argument("--quiet", action="store_true",
                         help="suppress the stdout summary")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"estimate": cmd_estimate, "simulate": cmd_simulate,
                "placebo": cmd_placebo}
    try:
        config = _load_config(args.config)
        if not isinstance(config, dict):
            _fail("config root must be a JSON object")
        return handlers[args.command](config, args)
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SparseScError as err:
        print(f"solver error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
