"""Placebo-bootstrap variance estimation for the average treatment effect.

Each draw treats a randomly chosen donor as if it were the treated unit,
re-runs the full configured estimation pipeline on the remaining donors, and
records the resulting post-period effect.  The spread of those placebo
effects estimates the estimator's sampling variance under homoskedastic
noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from .estimators import fit_estimator
from .exceptions import ConfigError, EstimatorError, InsufficientDonorsError
from .panel import PanelDataset, PredictorSpec
from .simulation import max_workers
from .solvers import SolverOptions


@dataclass(frozen=True)
class PlaceboResult:
    """Placebo effect draws and the variance estimate they imply."""

    tau_draws: np.ndarray
    variance: float
    sd: float
    draws: int
    per_draw: list[dict] = field(default_factory=list)
    bias_corrected: bool = False


def _placebo_draw(args):
    panel, estimator, spec, opts, donor_position = args
    placebo_panel = panel.subpanel_without_treated(int(donor_position))
    try:
        fit, effect = fit_estimator(estimator, placebo_panel, spec, opts)
    except Exception as err:
        raise EstimatorError(
            f"placebo fit failed for unit {placebo_panel.units[donor_position]!r}: {err}"
        ) from err
    weights = None if fit is None else fit.w_star.values.tolist()
    return {
        "unit": placebo_panel.units[int(donor_position)],
        "tau": effect.att,
        "weights": weights,
    }


def placebo_variance(
    panel: PanelDataset,
    estimator: str,
    draws: int,
    seed: int,
    spec: PredictorSpec | None = None,
    opts: SolverOptions | None = None,
    with_replacement: bool = True,
    bias_corrected: bool = False,
    workers: int = 1,
) -> PlaceboResult:
    """Estimate the effect variance from placebo runs on donor units.

    Donors are sampled uniformly with replacement (or without, when
    ``draws`` does not exceed the donor count and ``with_replacement`` is
    off).  The true treated unit is excluded from every placebo run.  The
    variance divides by the number of draws; ``bias_corrected`` switches to
    draws - 1.
    """
    if draws < 1:
        raise ConfigError("placebo draws must be >= 1")
    if panel.n_donors < 3:
        raise InsufficientDonorsError(
            "placebo runs need at least 3 donors (one placebo-treated plus two controls)"
        )
    rng = np.random.default_rng(seed)
    if with_replacement:
        chosen = rng.integers(0, panel.n_donors, size=draws)
    else:
        if draws > panel.n_donors:
            raise ConfigError(
                "without-replacement sampling requires draws <= number of donors"
            )
        chosen = rng.permutation(panel.n_donors)[:draws]

    tasks = [(panel, estimator, spec, opts, int(pos)) for pos in chosen]
    workers = max(1, min(int(workers) if workers else 1, max_workers()))
    if workers == 1 or draws == 1:
        per_draw = [_placebo_draw(task) for task in tasks]
    else:
        with get_context("fork").Pool(processes=workers) as pool:
            per_draw = pool.map(_placebo_draw, tasks)

    taus = np.array([record["tau"] for record in per_draw])
    center = taus.mean()
    denominator = draws - 1 if bias_corrected and draws > 1 else draws
    variance = float(np.sum((taus - center) ** 2) / denominator)
    return PlaceboResult(
        tau_draws=taus,
        variance=variance,
        sd=float(np.sqrt(variance)),
        draws=draws,
        per_draw=per_draw,
        bias_corrected=bias_corrected,
    )
