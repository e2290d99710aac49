"""Linear factor model data generator, Monte Carlo study runner, and the
bias-bound / MSE-rate oracles used by the verification suite.

The generator produces outcomes delta + theta'Z_i + factors'loadings_i + eps
where units load one-hot on factors in consecutive groups, so the treated
unit (position 0) shares its factor with the first two donors and is exactly
replicable, up to noise, by their average.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from multiprocessing import get_context

import numpy as np

from .estimators import estimate_effect, fit_estimator
from .exceptions import ConfigError, SingularFactorGramError, StudyError
from .panel import LagSpec, PanelDataset, PredictorSpec
from .solvers import SolverOptions

ESTIMATOR_NAMES = ("sparse", "scm_cv", "scm_fixed", "did")


@dataclass(frozen=True)
class FactorModelConfig:
    """Simulation design: unit/period counts, covariate structure, factor
    dynamics, and noise levels."""

    n_units: int = 21
    n_periods: int = 30
    t0: int = 20
    tv: int = 10
    n_useful: int = 5
    n_nuisance: int = 5
    n_factors: int = 7
    group_size: int = 3
    ar_coef: float = 0.5
    noise_sd: float = 0.25
    intercept: float = 100.0
    useful_coef: float = 1.0
    n_lags: int = 10
    covariate_noise: float = 0.0
    factor_scale: float = 1.0
    oracle_match: bool = True
    seed: object = None

    _KEYS = {
        "n_units", "n_periods", "t0", "tv", "n_useful", "n_nuisance",
        "n_factors", "group_size", "ar_coef", "noise_sd", "intercept",
        "useful_coef", "n_lags", "covariate_noise", "factor_scale",
        "oracle_match", "seed",
    }

    @classmethod
    def from_dict(cls, raw: dict) -> "FactorModelConfig":
        unknown = set(raw) - cls._KEYS
        if unknown:
            raise ConfigError(f"unknown study keys: {sorted(unknown)}")
        return cls(**raw)

    def __post_init__(self):
        if min(self.n_units, self.n_periods, self.n_factors, self.group_size) < 1:
            raise ConfigError("unit, period, factor, and group counts must be positive")
        if self.n_units < 3:
            raise ConfigError("need at least 3 units (treated plus 2 donors)")
        if not 1 <= self.tv < self.t0 < self.n_periods:
            raise ConfigError("require 1 <= tv < t0 < n_periods")
        if self.n_useful < 0 or self.n_nuisance < 0 or self.n_covariates < 1:
            raise ConfigError("need at least one covariate")
        if abs(self.ar_coef) >= 1:
            raise ConfigError("AR(1) coefficient must satisfy |rho| < 1 (stationarity)")
        if self.noise_sd < 0 or self.covariate_noise < 0:
            raise ConfigError("noise scales must be nonnegative")
        if self.factor_scale < 0:
            raise ConfigError("factor_scale must be nonnegative")
        if self.n_factors * self.group_size < self.n_units:
            raise ConfigError("factor groups do not cover all units")
        if not 0 <= self.n_lags <= self.tv:
            raise ConfigError("n_lags must lie in [0, tv]")

    @property
    def n_covariates(self) -> int:
        return self.n_useful + self.n_nuisance

    @property
    def covariate_names(self) -> list[str]:
        return [f"z{i + 1:02d}" for i in range(self.n_covariates)]

    @property
    def useful_names(self) -> list[str]:
        return self.covariate_names[: self.n_useful]


@dataclass(frozen=True)
class PanelTruth:
    """Oracle record kept alongside a simulated panel."""

    covariates: np.ndarray
    loadings: np.ndarray
    factors: np.ndarray
    useful_idx: np.ndarray
    useful_coef: float
    oracle_weights: np.ndarray
    true_effect: float
    noise_sd: float


@dataclass(frozen=True)
class SimulatedPanel:
    panel: PanelDataset
    truth: PanelTruth


@dataclass(frozen=True)
class BiasBound:
    """Evaluated bias bound: outcome-fit term plus useful-predictor term.

    The omitted higher-order remainder is reported separately as 1/t0.
    """

    total: float
    outcome_term: float
    predictor_term: float
    gamma: float
    remainder: float


def simulate_panel(cfg: FactorModelConfig) -> SimulatedPanel:
    """Draw one panel from the factor model; reproducible from cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    n, t = cfg.n_units, cfg.n_periods
    k = cfg.n_covariates

    covariates = rng.uniform(0.0, 1.0, size=(n, k))
    useful = slice(0, cfg.n_useful)
    if cfg.oracle_match:
        covariates[0, useful] = 0.5 * (covariates[1, useful] + covariates[2, useful])
        if cfg.covariate_noise > 0 and cfg.n_useful > 0:
            covariates[0, useful] += rng.normal(0.0, cfg.covariate_noise, size=cfg.n_useful)

    loadings = np.zeros((n, cfg.n_factors))
    loadings[np.arange(n), np.arange(n) // cfg.group_size] = cfg.factor_scale

    factors = np.empty((t, cfg.n_factors))
    factors[0] = rng.normal(0.0, 1.0 / np.sqrt(1.0 - cfg.ar_coef**2), size=cfg.n_factors)
    innovations = rng.normal(0.0, 1.0, size=(t - 1, cfg.n_factors))
    for s in range(1, t):
        factors[s] = cfg.ar_coef * factors[s - 1] + innovations[s - 1]

    theta = np.zeros(k)
    theta[useful] = cfg.useful_coef
    shocks = rng.normal(0.0, cfg.noise_sd, size=(n, t))
    outcomes = cfg.intercept + (covariates @ theta)[:, None] + loadings @ factors.T + shocks

    predictors = {name: covariates[:, i] for i, name in enumerate(cfg.covariate_names)}
    panel = PanelDataset(
        units=[f"u{i + 1:02d}" for i in range(n)],
        times=list(range(1, t + 1)),
        outcomes=outcomes,
        predictors=predictors,
        treated_unit=0,
        t0=cfg.t0,
        tv=cfg.tv,
    )
    oracle = np.zeros(n - 1)
    oracle[:2] = 0.5
    truth = PanelTruth(
        covariates=covariates,
        loadings=loadings,
        factors=factors,
        useful_idx=np.arange(cfg.n_useful),
        useful_coef=cfg.useful_coef,
        oracle_weights=oracle,
        true_effect=0.0,
        noise_sd=cfg.noise_sd,
    )
    return SimulatedPanel(panel=panel, truth=truth)


def study_predictor_spec(cfg: FactorModelConfig) -> PredictorSpec:
    """Covariates plus outcome lags at the last n_lags training periods.

    The lags address fixed periods (labels tv-n_lags+1 .. tv), so the design
    is identical across the training and shifted windows; only time-varying
    covariates would re-aggregate, and the generator has none.
    """
    first = cfg.tv - cfg.n_lags + 1
    lags = tuple(
        LagSpec.at_period(label, name=f"y_t{label:03d}")
        for label in range(first, cfg.tv + 1)
    )
    return PredictorSpec(covariates=tuple(cfg.covariate_names), lags=lags)


def mad(series_a, series_b) -> float:
    """Mean absolute deviation between two equal-length series."""
    a = np.ascontiguousarray(series_a, dtype=np.float64)
    b = np.ascontiguousarray(series_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ConfigError("mad expects two equal-length nonempty vectors")
    return float(np.mean(np.abs(a - b)))


def bias_bound_oracle(sim: SimulatedPanel, w, t0: int | None = None) -> BiasBound:
    """Evaluate the factor-model bias bound at donor weights w.

    gamma = (max |factor|)^2 * F / (smallest eigenvalue of the pre-period
    factor Gram); expectations are replaced by realized absolute deviations.
    """
    w = np.ascontiguousarray(getattr(w, "values", w), dtype=np.float64)
    panel, truth = sim.panel, sim.truth
    t0 = panel.t0 if t0 is None else int(t0)
    pre_factors = truth.factors[:t0]
    gram = pre_factors.T @ pre_factors
    smallest = float(np.linalg.eigvalsh(gram)[0])
    if smallest < 1e-12:
        raise SingularFactorGramError(
            f"pre-period factor Gram is singular (min eigenvalue {smallest:.3e})"
        )
    lam_bar = float(np.abs(pre_factors).max())
    n_factors = truth.factors.shape[1]
    gamma = lam_bar**2 * n_factors / smallest

    treated_pre = panel.treated_outcomes()[:t0]
    synth_pre = panel.donor_outcomes()[:t0] @ w
    outcome_term = (gamma / t0) * float(np.sum(np.abs(treated_pre - synth_pre)))

    useful = truth.useful_idx
    z1 = truth.covariates[0, useful]
    z0 = truth.covariates[1:, useful]
    predictor_gaps = np.abs(z1 - w @ z0)
    predictor_term = abs(truth.useful_coef * (1.0 - gamma / t0)) * float(predictor_gaps.sum())

    return BiasBound(
        total=outcome_term + predictor_term,
        outcome_term=outcome_term,
        predictor_term=predictor_term,
        gamma=gamma,
        remainder=1.0 / t0,
    )


def mse_rate_oracle(n_predictors: int, n_useful: int, n_donors: int,
                    noise_scale: float) -> tuple[float, float]:
    """Comparative MSE rate envelopes for the penalized and standard matches."""
    if n_useful < 1 or n_predictors < n_useful:
        raise ConfigError("require n_predictors >= n_useful >= 1")
    if n_donors < 2:
        raise ConfigError("require at least 2 donors")
    if noise_scale <= 0:
        raise ConfigError("noise_scale must be positive")
    log_term = np.sqrt(2.0 * np.log(n_donors))
    sparse_rate = noise_scale * np.sqrt(n_useful) / n_predictors * log_term
    standard_rate = noise_scale * np.sqrt(2.0 * np.log(n_donors) / n_predictors)
    return float(sparse_rate), float(standard_rate)


def predictor_match_mse(sim: SimulatedPanel, w, relative_to_oracle: bool = False) -> float:
    """Realized covariate-match MSE (1/k)||Z1 - Z0 w||^2 on raw covariates."""
    w = np.ascontiguousarray(getattr(w, "values", w), dtype=np.float64)
    z = sim.truth.covariates
    target = z[1:].T @ sim.truth.oracle_weights if relative_to_oracle else z[0]
    gap = target - z[1:].T @ w
    return float(gap @ gap / z.shape[1])


@dataclass(frozen=True)
class StudyResult:
    """Per-replication metric records plus per-estimator aggregates."""

    records: list[dict]
    summary: dict
    replications: int
    seed: int
    failures: list[dict] = field(default_factory=list)


def _replication_metrics(cfg, sim, name, fit, effect) -> dict:
    panel, truth = sim.panel, sim.truth
    post_gap = effect.tau_series - truth.true_effect
    treated_pre = panel.treated_outcomes()[: panel.t0]
    record = {
        "estimator": name,
        "att": effect.att,
        "post_mse": float(np.mean(post_gap**2)),
        "mean_abs_tau_post": float(np.mean(np.abs(effect.tau_series))),
        "k_used": effect.k_used,
    }
    if fit is None:
        w = np.full(panel.n_donors, 1.0 / panel.n_donors)
        record["pre_mad"] = mad(treated_pre, effect.counterfactual[: panel.t0])
    else:
        w = fit.w_star.values
        record["pre_mad"] = mad(treated_pre, panel.donor_outcomes()[: panel.t0] @ w)
    record["oracle_weight_share"] = float(w[0] + w[1])
    useful = truth.useful_idx
    if len(useful):
        z1 = truth.covariates[0, useful]
        z0 = truth.covariates[1:, useful]
        record["useful_mad"] = float(np.mean(np.abs(z1 - w @ z0)))
    else:
        record["useful_mad"] = float("nan")
    record["predictor_mse"] = predictor_match_mse(sim, w)
    record["predictor_mse_vs_oracle"] = predictor_match_mse(sim, w, relative_to_oracle=True)

    bound = bias_bound_oracle(sim, w)
    record["bias_bound"] = bound.total
    record["bias_bound_remainder"] = bound.remainder
    record["noise_se"] = float(truth.noise_sd * np.sqrt(1.0 + w @ w))

    if fit is not None and fit.lambda_star is not None:
        record["lambda_star"] = fit.lambda_star
        record["anchor"] = fit.anchor_used
    else:
        record["lambda_star"] = float("nan")
        record["anchor"] = -1

    if fit is not None:
        values = fit.v_star.values
        threshold = fit.diagnostics.get("zero_threshold", 1e-8)
        k = cfg.n_covariates
        nuisance = np.arange(cfg.n_useful, k)
        useful_cov = np.arange(cfg.n_useful)
        record["v_weights"] = values.tolist()
        record["nuisance_zero_frac"] = (
            float(np.mean(values[nuisance] <= threshold)) if len(nuisance) else float("nan")
        )
        record["useful_zero_frac"] = (
            float(np.mean(values[useful_cov] <= threshold)) if len(useful_cov) else float("nan")
        )
        record["nuisance_mass"] = float(values[nuisance].sum()) if len(nuisance) else 0.0
        record["useful_mass"] = float(values[useful_cov].sum()) if len(useful_cov) else 0.0
    else:
        record["v_weights"] = []
        for key in ("nuisance_zero_frac", "useful_zero_frac", "nuisance_mass", "useful_mass"):
            record[key] = float("nan")
    return record


def _run_replication(args) -> list[dict]:
    cfg, estimators, opts, seed, rep = args
    sim = simulate_panel(replace(cfg, seed=[seed, rep]))
    spec = study_predictor_spec(cfg)
    records = []
    for name in estimators:
        try:
            fit, effect = fit_estimator(name, sim.panel, spec, opts)
            record = _replication_metrics(cfg, sim, name, fit, effect)
            record["rep"] = rep
            record["error"] = ""
            records.append(record)
        except Exception as err:  # recorded, not fatal
            records.append({"rep": rep, "estimator": name, "error": f"{type(err).__name__}: {err}"})
    return records


def max_workers() -> int:
    cap = os.environ.get("SPARSE_SC_THREADS")
    available = os.cpu_count() or 1
    if cap:
        try:
            return max(1, min(available, int(cap)))
        except ValueError:
            raise ConfigError(f"SPARSE_SC_THREADS must be an integer, got {cap!r}")
    return available


def run_study(
    cfg: FactorModelConfig,
    estimators,
    replications: int,
    seed: int,
    opts: SolverOptions | None = None,
    workers: int | None = None,
) -> StudyResult:
    """Monte Carlo study: simulate, fit each estimator, collect the metrics.

    Each replication draws its RNG stream from (seed, replication index), so
    results are identical however the work is scheduled.  Replications that
    raise are recorded as failures; the run aborts if more than 5% fail.
    """
    if replications < 1:
        raise ConfigError("replications must be >= 1")
    for name in estimators:
        if name not in ESTIMATOR_NAMES:
            raise ConfigError(f"unknown estimator {name!r}")
    opts = opts or SolverOptions()
    workers = max_workers() if workers is None else max(1, int(workers))

    tasks = [(cfg, tuple(estimators), opts, int(seed), rep) for rep in range(replications)]
    if workers == 1 or replications == 1:
        batches = [_run_replication(task) for task in tasks]
    else:
        chunk = max(1, replications // (workers * 8))
        with get_context("fork").Pool(processes=workers) as pool:
            batches = pool.map(_run_replication, tasks, chunksize=chunk)

    records, failures = [], []
    for batch in batches:
        for record in batch:
            (failures if record.get("error") else records).append(record)
    if len(failures) > 0.05 * replications * len(list(estimators)):
        raise StudyError(
            f"{len(failures)} replication fits failed "
            f"(first: {failures[0]['error']})"
        )
    return StudyResult(
        records=records,
        summary=summarize_records(records),
        replications=replications,
        seed=int(seed),
        failures=failures,
    )


_SUMMARY_FIELDS = (
    "post_mse", "pre_mad", "useful_mad", "oracle_weight_share", "att",
    "lambda_star", "nuisance_zero_frac", "useful_zero_frac",
    "nuisance_mass", "useful_mass", "mean_abs_tau_post", "bias_bound",
    "predictor_mse", "predictor_mse_vs_oracle", "k_used",
)


def summarize_records(records: list[dict]) -> dict:
    """Mean, Monte Carlo SE, and quartiles of every metric, per estimator."""
    summary = {}
    names = sorted({r["estimator"] for r in records})
    for name in names:
        rows = [r for r in records if r["estimator"] == name]
        block = {"replications": len(rows)}
        for metric in _SUMMARY_FIELDS:
            values = np.array([row[metric] for row in rows if metric in row], dtype=float)
            values = values[np.isfinite(values)]
            if len(values) == 0:
                continue
            block[metric] = {
                "mean": float(values.mean()),
                "mc_se": float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0,
                "q25": float(np.quantile(values, 0.25)),
                "q50": float(np.quantile(values, 0.50)),
                "q75": float(np.quantile(values, 0.75)),
            }
        summary[name] = block
    return summary
