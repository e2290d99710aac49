"""Sparse synthetic control estimation.

Penalized predictor selection for synthetic control estimators, with
baseline estimators, a linear factor model simulation harness, and
placebo-bootstrap inference.
"""

from .estimators import (
    EffectEstimate,
    SparseScFit,
    estimate_effect,
    fit_did,
    fit_scm_cv,
    fit_scm_fixed_v,
    fit_sparse_sc,
)
from .exceptions import (
    ConfigError,
    DataError,
    DimensionError,
    SolverError,
    SparseScError,
)
from .inference import PlaceboResult, placebo_variance
from .panel import (
    DesignMatrices,
    LagSpec,
    PanelDataset,
    PanelSchema,
    PredictorSpec,
    build_design,
    load_panel,
)
from .simulation import (
    FactorModelConfig,
    SimulatedPanel,
    StudyResult,
    bias_bound_oracle,
    mad,
    mse_rate_oracle,
    run_study,
    simulate_panel,
)
from .solvers import (
    DonorWeights,
    LambdaPathEntry,
    LowerSolution,
    PredictorWeights,
    SolverOptions,
    joint_penalized_step,
    lambda_path,
    lower_grad_v,
    lower_grad_w,
    lower_objective,
    rescale_v,
    solve_lower,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DesignMatrices",
    "DimensionError",
    "DonorWeights",
    "EffectEstimate",
    "FactorModelConfig",
    "LagSpec",
    "LambdaPathEntry",
    "LowerSolution",
    "PanelDataset",
    "PanelSchema",
    "PlaceboResult",
    "PredictorSpec",
    "PredictorWeights",
    "SimulatedPanel",
    "SolverError",
    "SolverOptions",
    "SparseScError",
    "SparseScFit",
    "StudyResult",
    "bias_bound_oracle",
    "build_design",
    "estimate_effect",
    "fit_did",
    "fit_scm_cv",
    "fit_scm_fixed_v",
    "fit_sparse_sc",
    "joint_penalized_step",
    "lambda_path",
    "load_panel",
    "lower_grad_v",
    "lower_grad_w",
    "lower_objective",
    "mad",
    "mse_rate_oracle",
    "placebo_variance",
    "rescale_v",
    "run_study",
    "simulate_panel",
    "solve_lower",
]
