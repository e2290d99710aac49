"""End-to-end estimators: sparse synthetic control, the unpenalized
cross-validated variant, fixed-weight standard SCM, and difference in
differences, plus treatment-effect extraction from fitted weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DegenerateDesignError
from .panel import DesignMatrices, PanelDataset, PredictorSpec, build_design
from .solvers import (
    solve_lower_anchored,
    DonorWeights,
    LambdaPathEntry,
    PredictorWeights,
    SolverOptions,
    default_lambda_grid,
    default_v_init,
    lambda_path,
    rescale_v,
    solve_lower,
)


@dataclass(frozen=True)
class SparseScFit:
    """Fitted predictor/donor weights with the penalty path and diagnostics."""

    v_star: PredictorWeights
    w_star: DonorWeights
    lambda_star: float | None
    path: list[LambdaPathEntry]
    anchor_used: int | None
    predictor_names: list[str]
    donor_units: list[str]
    method: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def k_used(self) -> int:
        threshold = self.diagnostics.get("zero_threshold", 1e-8)
        return int(np.count_nonzero(self.v_star.values > threshold))


@dataclass(frozen=True)
class EffectEstimate:
    """Per-period treatment effects and their post-period average."""

    tau_series: np.ndarray
    att: float
    counterfactual: np.ndarray
    method: str
    k_used: int
    times: list
    t0: int


def _effect_from_counterfactual(panel, counterfactual, method, k_used):
    tau_series = (panel.treated_outcomes() - counterfactual)[panel.t0 :]
    return EffectEstimate(
        tau_series=tau_series,
        att=float(tau_series.mean()),
        counterfactual=counterfactual,
        method=method,
        k_used=k_used,
        times=list(panel.times),
        t0=panel.t0,
    )


def estimate_effect(fit, panel: PanelDataset) -> EffectEstimate:
    """Counterfactual and per-period effects from fitted donor weights.

    ``fit`` may be a SparseScFit, a DonorWeights, or a plain weight vector.
    """
    if isinstance(fit, SparseScFit):
        w = fit.w_star.values
        method = fit.method
        k_used = fit.k_used
    elif isinstance(fit, DonorWeights):
        w, method, k_used = fit.values, "weights", 0
    else:
        w = np.ascontiguousarray(fit, dtype=np.float64)
        method, k_used = "weights", 0
    if w.shape != (panel.n_donors,):
        raise ConfigError(
            f"weights cover {w.shape[0]} donors but the panel has {panel.n_donors}"
        )
    counterfactual = panel.donor_outcomes() @ w
    return _effect_from_counterfactual(panel, counterfactual, method, k_used)


def fit_did(panel: PanelDataset) -> EffectEstimate:
    """Difference in differences with uniform donor weights and the full
    pre-treatment window as baseline."""
    treated = panel.treated_outcomes()
    donors_mean = panel.donor_outcomes().mean(axis=1)
    pre = slice(0, panel.t0)
    counterfactual = treated[pre].mean() + (donors_mean - donors_mean[pre].mean())
    return _effect_from_counterfactual(panel, counterfactual, "did", 0)


def _resolve_anchors(opts: SolverOptions, k: int) -> tuple[list[int], bool]:
    """Anchor candidates plus whether to screen (full path only on the best)."""
    if isinstance(opts.anchor, (int, np.integer)):
        idx = int(opts.anchor)
        if not 0 <= idx < k:
            raise ConfigError(f"anchor index {idx} out of range for K={k}")
        return [idx], False
    return list(range(k)), opts.anchor == "screen"


def _path_for_anchor(design, anchor, opts, outcome_window="train") -> list[LambdaPathEntry]:
    init = default_v_init(design, anchor)
    if opts.lambda_grid is not None:
        return lambda_path(design, opts.lambda_grid, anchor, opts, init=init,
                           outcome_window=outcome_window)
    probe = lambda_path(design, [0.0], anchor, opts, init=init,
                        outcome_window=outcome_window)
    grid = default_lambda_grid(probe[0].val_mse, opts)
    # Walk the grid from the largest penalty down through zero: warm starts
    # then keep zero weights zero until a weight genuinely re-enters, instead
    # of leaving half-shrunk remnants on the way up.  The unpenalized probe
    # only sets the grid scale.  Entries are reported in ascending order.
    walk = lambda_path(design, grid[::-1], anchor, opts, init=probe[0].v_raw,
                       outcome_window=outcome_window)
    return walk[::-1]


def _best_entry(path: list[LambdaPathEntry]) -> int:
    """Index of the minimum-validation-MSE entry.

    Entries whose lower refit sat on a flat solution face are skipped when a
    well-posed entry exists: their score is one arbitrary point of the
    solution set (the bilevel theory presumes unique lower solutions).
    """
    candidates = [i for i, entry in enumerate(path) if not entry.degenerate]
    if not candidates:
        candidates = list(range(len(path)))
    return min(candidates, key=lambda i: (path[i].val_mse, i))


def _path_is_wellposed(path: list[LambdaPathEntry]) -> bool:
    return any(not entry.degenerate for entry in path)


def _finish_fit(panel, spec, design, path, anchor, opts, method, anchor_mses):
    best = _best_entry(path)
    entry = path[best]
    shifted = build_design(panel, spec, shifted=True, standardize=design.standardized)
    # With a sparse V* the shifted problem can be underdetermined; anchor the
    # refit at the validated entry weights so ties resolve toward them.
    refit = solve_lower_anchored(
        entry.v, shifted.x1_train, shifted.x0_train, entry.w.values, opts
    )
    w_star = refit.w
    effect = estimate_effect(w_star.values, panel)
    pre_gap = panel.treated_outcomes()[: panel.t0] - effect.counterfactual[: panel.t0]
    residuals = np.abs(shifted.x1_train - shifted.x0_train @ w_star.values)
    diagnostics = {
        "pre_mse": float(np.mean(pre_gap**2)),
        "pre_mad": float(np.mean(np.abs(pre_gap))),
        "val_mse": entry.val_mse,
        "zero_set": sorted(design.predictor_names[k] for k in entry.zero_set),
        "predictor_residuals": dict(zip(design.predictor_names, residuals.tolist())),
        "zero_threshold": opts.zero_threshold,
        "degenerate_lower": refit.degenerate,
        "kkt_residual": refit.kkt_residual,
        "zero_variance_rows": list(design.zero_variance),
    }
    if anchor_mses is not None:
        diagnostics["anchor_val_mse"] = anchor_mses
    return SparseScFit(
        v_star=entry.v,
        w_star=w_star,
        lambda_star=entry.lam,
        path=path,
        anchor_used=anchor,
        predictor_names=list(design.predictor_names),
        donor_units=panel.donor_units,
        method=method,
        diagnostics=diagnostics,
    )


def _fit_penalized(panel, spec, opts, method, grid_override=None,
                   outcome_window="train"):
    opts = opts or SolverOptions()
    if grid_override is not None:
        opts = SolverOptions(**{**opts.__dict__, "lambda_grid": grid_override})
    design = build_design(panel, spec)
    if design.n_predictors < 1:
        raise DegenerateDesignError("design has no usable predictor rows")
    if panel.t0 - panel.tv < 1:
        raise ConfigError("need at least one validation period (t0 - tv >= 1)")

    anchors, screen = _resolve_anchors(opts, design.n_predictors)
    if screen and len(anchors) > 1:
        probe_opts = SolverOptions(**{**opts.__dict__, "lambda_grid": [0.0]})
        probe_mses = {}
        for k0 in anchors:
            probe = _path_for_anchor(design, k0, probe_opts, outcome_window)
            probe_mses[k0] = probe[0].val_mse
        anchors = [min(probe_mses, key=lambda k0: (probe_mses[k0], k0))]

    best_anchor, best_path, best_key = None, None, (2, np.inf)
    anchor_mses = {}
    for k0 in anchors:
        path = _path_for_anchor(design, k0, opts, outcome_window)
        mse = path[_best_entry(path)].val_mse
        anchor_mses[k0] = mse
        # anchors whose whole path is degenerate only win over their kind
        key = (0 if _path_is_wellposed(path) else 1, mse)
        if key < best_key:
            best_anchor, best_path, best_key = k0, path, key
    return _finish_fit(
        panel, spec, design, best_path, best_anchor, opts, method,
        anchor_mses if len(anchor_mses) > 1 else None,
    )


def fit_sparse_sc(panel: PanelDataset, spec: PredictorSpec,
                  opts: SolverOptions | None = None) -> SparseScFit:
    """Full penalized pipeline: anchor selection, penalty path, selection of
    the minimum-validation-MSE penalty, and a final donor-weight refit on the
    shifted training design."""
    return _fit_penalized(panel, spec, opts, "sparse_sc")


def fit_scm_cv(panel: PanelDataset, spec: PredictorSpec,
               opts: SolverOptions | None = None) -> SparseScFit:
    """Unpenalized baseline: the identical pipeline with the penalty forced
    to zero."""
    return _fit_penalized(panel, spec, opts, "scm_cv", grid_override=[0.0])


def fit_scm_fixed_v(panel: PanelDataset, spec: PredictorSpec,
                    opts: SolverOptions | None = None) -> SparseScFit:
    """Standard SCM benchmark: predictor weights fixed to the clipped diagonal
    of the pseudo-inverse of the training Gram matrix; single lower solve."""
    opts = opts or SolverOptions()
    design = build_design(panel, spec)
    x0 = design.x0_train
    gram = x0 @ x0.T
    diag = np.clip(np.diag(np.linalg.pinv(gram, hermitian=True)), 0.0, None)
    if diag.max() <= 0:
        diag = np.ones_like(diag)
    v = PredictorWeights(values=diag / diag.max(), anchor=int(np.argmax(diag)),
                         rescaled=True)
    sol = solve_lower(v, design.x1_train, design.x0_train, opts)
    effect = estimate_effect(sol.w.values, panel)
    pre_gap = panel.treated_outcomes()[: panel.t0] - effect.counterfactual[: panel.t0]
    residuals = np.abs(design.x1_train - design.x0_train @ sol.w.values)
    return SparseScFit(
        v_star=v,
        w_star=sol.w,
        lambda_star=None,
        path=[],
        anchor_used=None,
        predictor_names=list(design.predictor_names),
        donor_units=panel.donor_units,
        method="scm_fixed",
        diagnostics={
            "pre_mse": float(np.mean(pre_gap**2)),
            "pre_mad": float(np.mean(np.abs(pre_gap))),
            "val_mse": float(np.mean((design.y1_val - design.y0_val @ sol.w.values) ** 2)),
            "zero_set": sorted(
                design.predictor_names[k] for k in v.zero_set(opts.zero_threshold)
            ),
            "predictor_residuals": dict(zip(design.predictor_names, residuals.tolist())),
            "zero_threshold": opts.zero_threshold,
            "degenerate_lower": sol.degenerate,
            "kkt_residual": sol.kkt_residual,
            "zero_variance_rows": list(design.zero_variance),
        },
    )


_FITTERS = {
    "sparse": fit_sparse_sc,
    "scm_cv": fit_scm_cv,
    "scm_fixed": fit_scm_fixed_v,
}


def fit_estimator(name: str, panel: PanelDataset, spec: PredictorSpec | None,
                  opts: SolverOptions | None = None):
    """Dispatch an estimator by config name; returns (fit_or_none, effect)."""
    if name == "did":
        return None, fit_did(panel)
    if name not in _FITTERS:
        raise ConfigError(
            f"unknown estimator {name!r}; choose from {sorted(_FITTERS) + ['did']}"
        )
    if spec is None:
        raise ConfigError(f"estimator {name!r} requires a predictor spec")
    fit = _FITTERS[name](panel, spec, opts)
    return fit, estimate_effect(fit, panel)


def fit_report(fit: SparseScFit | None, effect: EffectEstimate,
               panel: PanelDataset) -> dict:
    """JSON-ready report of one fitted estimator."""
    report = {
        "method": effect.method,
        "att": effect.att,
        "k_used": effect.k_used,
        "effects": {
            "time": [str(t) for t in panel.times],
            "actual": panel.treated_outcomes().tolist(),
            "counterfactual": effect.counterfactual.tolist(),
            "gap": (panel.treated_outcomes() - effect.counterfactual).tolist(),
        },
    }
    if fit is not None:
        report.update(
            {
                "lambda_star": fit.lambda_star,
                "anchor_used": (
                    None if fit.anchor_used is None
                    else fit.predictor_names[fit.anchor_used]
                ),
                "predictor_weights": dict(
                    zip(fit.predictor_names, fit.v_star.values.tolist())
                ),
                "donor_weights": dict(zip(fit.donor_units, fit.w_star.values.tolist())),
                "path": [
                    {
                        "lambda": entry.lam,
                        "val_mse": entry.val_mse,
                        "zero_count": len(entry.zero_set),
                    }
                    for entry in fit.path
                ],
                "diagnostics": fit.diagnostics,
            }
        )
    return report
