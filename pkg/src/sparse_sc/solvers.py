"""Optimization core for sparse synthetic controls.

Two nested problems are solved here.  The lower level finds simplex donor
weights minimizing a diagonally weighted predictor mismatch; the joint
penalized step then descends on the predictor weights themselves, scoring
candidates by validation-window outcome fit plus an L1 penalty, with one
anchor weight pinned at 1 to remove the scale indeterminacy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import (
    active_set_simplex,
    kkt_residual as _kkt_kernel,
    pgd_simplex,
    project_simplex,
    weighted_gram,
)
from .exceptions import (
    AllZeroWeightsError,
    ConfigError,
    DimensionError,
    InfeasibleAnchorError,
    SolverError,
)
from .panel import DesignMatrices

_SUPPORT_TOL = 1e-10
_DEGENERATE_EIG = 1e-10


@dataclass
class SolverOptions:
    """Tunable tolerances and policies, all exposed through the CLI config.

    anchor is one of "all" (try every predictor as the pinned weight and keep
    the best validation fit), "screen" (pick the anchor from unpenalized fits,
    then run the full penalty path once), or an explicit predictor index.
    """

    tol: float = 1e-8
    max_iter: int = 10_000
    kkt_tol: float = 1e-6
    joint_tol: float = 1e-9
    joint_max_iter: int = 100
    zero_threshold: float = 1e-8
    anchor: str | int = "all"
    lambda_grid: list[float] | None = None
    grid_points: int = 20
    grid_lo: float = 1e-4
    grid_hi: float = 10.0

    _KEYS = {
        "tol", "max_iter", "kkt_tol", "joint_tol", "joint_max_iter",
        "zero_threshold", "anchor", "lambda_grid", "grid_points",
        "grid_lo", "grid_hi",
    }

    @classmethod
    def from_dict(cls, raw: dict) -> "SolverOptions":
        unknown = set(raw) - cls._KEYS
        if unknown:
            raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**raw)

    def __post_init__(self):
        if isinstance(self.anchor, str):
            if self.anchor not in ("all", "screen"):
                raise ConfigError(f"anchor must be 'all', 'screen', or an index")
        elif not isinstance(self.anchor, (int, np.integer)):
            raise ConfigError(f"anchor must be 'all', 'screen', or an index")
        if self.grid_points < 1:
            raise ConfigError("grid_points must be >= 1")
        if not 0 < self.grid_lo < self.grid_hi:
            raise ConfigError("require 0 < grid_lo < grid_hi")


@dataclass(frozen=True)
class PredictorWeights:
    """Nonnegative diagonal predictor weights with one anchored entry."""

    values: np.ndarray
    anchor: int
    rescaled: bool = False

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionError("predictor weights must be a vector")
        if not 0 <= self.anchor < len(values):
            raise InfeasibleAnchorError(
                f"anchor {self.anchor} out of range for {len(values)} predictors"
            )
        if np.any(values < 0):
            raise ConfigError("predictor weights must be nonnegative")
        object.__setattr__(self, "values", values)

    def zero_set(self, threshold: float = 1e-8) -> set[int]:
        zero = {int(k) for k in np.nonzero(self.values <= threshold)[0]}
        zero.discard(self.anchor)
        return zero


@dataclass(frozen=True)
class DonorWeights:
    """Convex combination weights over the donor pool."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionError("donor weights must be a vector")
        if np.any(values < -1e-10) or abs(values.sum() - 1.0) > 1e-10:
            raise ConfigError("donor weights must lie on the unit simplex")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class LowerSolution:
    w: DonorWeights
    objective: float
    kkt_residual: float
    iterations: int
    degenerate: bool = False


@dataclass(frozen=True)
class LambdaPathEntry:
    lam: float
    v: PredictorWeights
    w: DonorWeights
    val_mse: float
    zero_set: frozenset[int] = field(default_factory=frozenset)
    # optimizer state before rescaling; seeds the next grid point
    v_raw: PredictorWeights | None = None
    # lower refit sat on a flat face: its score is one arbitrary selection
    # from the solution set, not a property of the weighting
    degenerate: bool = False


def _values(x) -> np.ndarray:
    if isinstance(x, (PredictorWeights, DonorWeights)):
        return x.values
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_dims(v, x1, x0, w=None):
    if x0.ndim != 2:
        raise DimensionError("donor design must be a K x J matrix")
    k, j = x0.shape
    if x1.shape != (k,):
        raise DimensionError(f"treated design has shape {x1.shape}, expected ({k},)")
    if v.shape != (k,):
        raise DimensionError(f"predictor weights have shape {v.shape}, expected ({k},)")
    if w is not None and w.shape != (j,):
        raise DimensionError(f"donor weights have shape {w.shape}, expected ({j},)")


def lower_objective(v, x1, x0, w) -> float:
    """Weighted squared mismatch sum_k v_k (x1_k - (x0 w)_k)^2."""
    v, x1, x0, w = _values(v), _values(x1), np.asarray(x0, float), _values(w)
    _check_dims(v, x1, x0, w)
    r = x1 - x0 @ w
    return float(np.dot(v, r * r))


def lower_grad_w(v, x1, x0, w) -> np.ndarray:
    """Gradient of the lower objective in the donor weights: -2 x0'(v * r)."""
    v, x1, x0, w = _values(v), _values(x1), np.asarray(x0, float), _values(w)
    _check_dims(v, x1, x0, w)
    r = x1 - x0 @ w
    return -2.0 * (x0.T @ (v * r))


def lower_grad_v(x1, x0, w) -> np.ndarray:
    """Gradient of the lower objective in the predictor weights: r_k^2."""
    x1, x0, w = _values(x1), np.asarray(x0, float), _values(w)
    _check_dims(np.zeros(x0.shape[0]), x1, x0, w)
    r = x1 - x0 @ w
    return r * r


def _kkt_residual(a_mat, b_vec, w) -> float:
    """Max violation of simplex-KKT stationarity/complementarity at w.

    Computed for the max-normalized weighting, so the measure is invariant
    to rescaling the predictor weights.
    """
    return float(_kkt_kernel(a_mat, b_vec, w))


def _face_min_eigenvalue(a_mat, w) -> float:
    """Smallest curvature of the quadratic along the active simplex face."""
    support = np.nonzero(w > _SUPPORT_TOL)[0]
    if len(support) <= 1:
        return np.inf
    a_ss = a_mat[np.ix_(support, support)]
    m = len(support)
    ones = np.ones((1, m))
    _, _, vh = np.linalg.svd(ones)
    basis = vh[1:]
    reduced = basis @ a_ss @ basis.T
    return float(np.linalg.eigvalsh(reduced)[0])


def _polish(a_mat, b_vec, w):
    """Active-set refinement; returns the exact KKT point or None."""
    refined, converged = active_set_simplex(a_mat, b_vec, w, 5 * len(w) + 20)
    return refined if converged else None


def solve_lower(
    v,
    x1,
    x0,
    opts: SolverOptions | None = None,
    warm_start: np.ndarray | None = None,
    check_degeneracy: bool = True,
) -> LowerSolution:
    """Minimize the weighted predictor mismatch over the donor simplex.

    Projected gradient descent from the uniform start (or ``warm_start``).
    The weighting is max-normalized internally, which makes the returned
    weights exactly invariant to positive rescaling of ``v``.
    """
    opts = opts or SolverOptions()
    v, x1, x0 = _values(v), _values(x1), np.ascontiguousarray(x0, dtype=np.float64)
    _check_dims(v, x1, x0)
    v_max = v.max() if v.size else 0.0
    if v_max <= 0.0:
        raise AllZeroWeightsError("lower-level solve requires at least one positive weight")
    v_norm = v / v_max

    k, j = x0.shape
    if j == 1:
        w = np.ones(1)
        a_mat = x0.T @ (v_norm[:, None] * x0)
        b_vec = x0.T @ (v_norm * x1)
        return LowerSolution(
            w=DonorWeights(w),
            objective=lower_objective(v, x1, x0, w),
            kkt_residual=abs(w.sum() - 1.0),
            iterations=0,
            degenerate=False,
        )

    a_mat, b_vec = weighted_gram(x0, x1, v_norm)
    exact_tol = min(opts.kkt_tol, 1e-9)

    iterations = 0
    w = None
    if warm_start is not None:
        candidate = _polish(a_mat, b_vec, np.asarray(warm_start, float))
        if candidate is not None and _kkt_residual(a_mat, b_vec, candidate) <= exact_tol:
            w = candidate
    if w is None:
        lip = 2.0 * float(np.abs(a_mat).sum(axis=1).max())
        w0 = np.full(j, 1.0 / j) if warm_start is None else np.asarray(warm_start, float).copy()
        budget = min(300, opts.max_iter)
        w, iterations, converged = pgd_simplex(a_mat, b_vec, w0, lip, opts.tol, budget)
        w = project_simplex(w)
        while True:
            polished = _polish(a_mat, b_vec, w)
            if polished is not None and _kkt_residual(a_mat, b_vec, polished) <= _kkt_residual(a_mat, b_vec, w):
                w = polished
            if converged or _kkt_residual(a_mat, b_vec, w) <= exact_tol:
                break
            if iterations >= opts.max_iter:
                break
            step = min(2000, opts.max_iter - iterations)
            w, extra, converged = pgd_simplex(a_mat, b_vec, w, lip, opts.tol, step)
            iterations += extra
            w = project_simplex(w)

    residual = _kkt_residual(a_mat, b_vec, w)
    if residual > opts.kkt_tol:
        raise SolverError(
            f"lower-level solve did not converge in {opts.max_iter} iterations "
            f"(KKT residual {residual:.3e})",
            residual=residual,
        )
    degenerate = False
    if check_degeneracy:
        degenerate = _face_min_eigenvalue(a_mat, w) < _DEGENERATE_EIG
    return LowerSolution(
        w=DonorWeights(w),
        objective=lower_objective(v, x1, x0, w),
        kkt_residual=residual,
        iterations=iterations,
        degenerate=degenerate,
    )


def rescale_v(pw: PredictorWeights) -> PredictorWeights:
    """Scale predictor weights into [0, 1] by dividing by the maximum.

    The zero pattern is preserved exactly; the lower-level argmin is
    unchanged because the objective is scale-invariant in the weights.
    """
    values = pw.values
    top = values.max() if values.size else 0.0
    if top <= 0.0:
        raise AllZeroWeightsError("cannot rescale all-zero predictor weights")
    scaled = values / top
    scaled[values == 0.0] = 0.0
    return PredictorWeights(values=scaled, anchor=pw.anchor, rescaled=True)


def default_v_init(design: DesignMatrices, anchor: int) -> PredictorWeights:
    """Initialize free weights from the diagonal of the pseudo-inverse of the
    training predictor Gram matrix, clipped at zero; the anchor is set to 1."""
    x0 = design.x0_train
    gram = x0 @ x0.T
    diag = np.clip(np.diag(np.linalg.pinv(gram, hermitian=True)), 0.0, None)
    diag[anchor] = 1.0
    return PredictorWeights(values=diag, anchor=anchor, rescaled=False)


def _val_mse(design: DesignMatrices, w: np.ndarray) -> float:
    gap = design.y1_val - design.y0_val @ w
    return float(np.mean(gap * gap))


def _solve_w_fast(x1, x0, v, warm, opts) -> np.ndarray:
    """Bare warm-started lower solve for internal line searches."""
    v_max = v.max()
    if v_max <= 0.0:
        raise AllZeroWeightsError("lower-level solve requires at least one positive weight")
    a_mat, b_vec = weighted_gram(x0, x1, v / v_max)
    w, converged = active_set_simplex(a_mat, b_vec, warm, 5 * len(warm) + 20)
    if converged and _kkt_kernel(a_mat, b_vec, w) <= min(opts.kkt_tol, 1e-9):
        return w
    return solve_lower(v, x1, x0, opts, warm_start=warm, check_degeneracy=False).w.values


def solve_lower_anchored(v, x1, x0, w_ref, opts: SolverOptions | None = None,
                         pull: float = 1e-6) -> LowerSolution:
    """Lower solve with a vanishing proximal pull toward reference weights.

    When a sparse weighting leaves the donor problem underdetermined, the
    minimizers form a flat face; the pull selects the face point nearest
    ``w_ref`` instead of an arbitrary one, without materially moving
    well-identified solutions.
    """
    opts = opts or SolverOptions()
    v, x1, x0 = _values(v), _values(x1), np.ascontiguousarray(x0, dtype=np.float64)
    w_ref = np.ascontiguousarray(getattr(w_ref, "values", w_ref), dtype=np.float64)
    _check_dims(v, x1, x0, w_ref)
    v_max = v.max() if v.size else 0.0
    if v_max <= 0.0:
        raise AllZeroWeightsError("lower-level solve requires at least one positive weight")
    a_mat, b_vec = weighted_gram(x0, x1, v / v_max)
    j = x0.shape[1]
    ridge = pull * (np.trace(a_mat) / j + 1.0)
    a_aug = a_mat + ridge * np.eye(j)
    b_aug = b_vec + ridge * w_ref
    w, converged = active_set_simplex(a_aug, b_aug, w_ref.copy(), 5 * j + 20)
    residual = _kkt_residual(a_aug, b_aug, w)
    if not converged or residual > opts.kkt_tol:
        lip = 2.0 * float(np.abs(a_aug).sum(axis=1).max())
        w, _, _ = pgd_simplex(a_aug, b_aug, w, lip, opts.tol, opts.max_iter)
        w = project_simplex(w)
        polished = _polish(a_aug, b_aug, w)
        if polished is not None and _kkt_residual(a_aug, b_aug, polished) <= residual:
            w = polished
        residual = _kkt_residual(a_aug, b_aug, w)
        if residual > opts.kkt_tol:
            raise SolverError("anchored lower solve did not converge", residual=residual)
    return LowerSolution(
        w=DonorWeights(w),
        objective=lower_objective(v, x1, x0, w),
        kkt_residual=residual,
        iterations=0,
        degenerate=_face_min_eigenvalue(a_mat, w) < _DEGENERATE_EIG,
    )


def _grad_v_of_outcome_mse(design, v, w, anchor, y1, y0):
    """Gradient in v of the outcome MSE over a window, differentiating the
    lower argmin through its KKT system on the active support."""
    x1, x0 = design.x1_train, design.x0_train
    k = len(v)
    support = np.nonzero(w > _SUPPORT_TOL)[0]
    m = len(support)
    grad = np.zeros(k)
    if m == 0:
        return grad
    x0_s = x0[:, support]
    r = x1 - x0 @ w
    a_ss = x0_s.T @ (v[:, None] * x0_s)
    bordered = np.zeros((m + 1, m + 1))
    bordered[:m, :m] = 2.0 * a_ss
    bordered[:m, m] = 1.0
    bordered[m, :m] = 1.0
    rhs = np.zeros((m + 1, k))
    rhs[:m, :] = 2.0 * (x0_s * r[:, None]).T
    try:
        sol = np.linalg.solve(bordered, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(bordered, rhs, rcond=None)
    dw_s = sol[:m, :]
    resid = y0 @ w - y1
    q = (2.0 / len(resid)) * (y0[:, support].T @ resid)
    grad = q @ dw_s
    grad[anchor] = 0.0
    return grad


def joint_penalized_step(
    design: DesignMatrices,
    lam: float,
    anchor: int,
    init: PredictorWeights | np.ndarray | None = None,
    opts: SolverOptions | None = None,
    outcome_window: str = "train",
) -> tuple[PredictorWeights, DonorWeights]:
    """One penalized bi-level descent: minimize the training-window outcome
    MSE plus an L1 penalty on the free predictor weights, with donor weights
    re-solved from the training design at every step.  (Selection across
    penalties then happens on the held-out validation window.)

    Block-alternating: projected gradient steps in the predictor weights
    (clipped at zero, anchor pinned at 1) with backtracking on the true
    composite objective, re-solving the lower problem per trial.
    ``outcome_window="val"`` instead scores the descent on the validation
    outcomes, which is the unpenalized cross-validated baseline's objective.
    """
    opts = opts or SolverOptions()
    k = design.n_predictors
    if not 0 <= anchor < k:
        raise InfeasibleAnchorError(f"anchor {anchor} out of range for K={k}")
    if lam < 0:
        raise ConfigError("penalty must be nonnegative")
    if outcome_window == "train":
        y1_win, y0_win = design.y1_train, design.y0_train
    elif outcome_window == "val":
        y1_win, y0_win = design.y1_val, design.y0_val
    else:
        raise ConfigError("outcome_window must be 'train' or 'val'")

    if init is None:
        v = default_v_init(design, anchor).values.copy()
    else:
        v = _values(init).copy()
        if v.shape != (k,):
            raise DimensionError(f"init has shape {v.shape}, expected ({k},)")
        v = np.clip(v, 0.0, None)
    v[anchor] = 1.0

    x1, x0 = design.x1_train, design.x0_train

    def composite(v_try, w_try):
        penalty = lam * (v_try.sum() - v_try[anchor])
        gap = y1_win - y0_win @ w_try
        return float(np.mean(gap * gap)) + penalty

    sol = solve_lower(v, x1, x0, opts, check_degeneracy=False)
    w = sol.w.values
    objective = composite(v, w)
    scale = objective if objective > 0 else 1.0

    def descend(v, w, objective, step):
        for _ in range(opts.joint_max_iter):
            grad = _grad_v_of_outcome_mse(design, v, w, anchor, y1_win, y0_win)
            grad[np.arange(k) != anchor] += lam
            grad[anchor] = 0.0
            grad /= scale

            accepted = False
            trial = min(step * 2.0, 1e6)
            for _ in range(60):
                v_new = np.clip(v - trial * grad, 0.0, None)
                v_new[anchor] = 1.0
                move = v_new - v
                if not move.any():
                    break
                w_new = _solve_w_fast(x1, x0, v_new, w, opts)
                obj_new = composite(v_new, w_new)
                decrease = (objective - obj_new) / scale
                needed = 1e-4 * float(move @ move) / trial
                if decrease >= needed:
                    accepted = True
                    break
                trial *= 0.25
            if not accepted:
                break
            step = trial
            improvement = (objective - obj_new) / max(abs(objective), 1e-300)
            v, w, objective = v_new, w_new, obj_new
            if improvement < opts.joint_tol:
                break
        return v, w, objective, step

    def snap_zeros(v, w, objective):
        # Clipped gradient steps approach zero weights only geometrically, so
        # finish the penalty's shrinkage where the weight's fit contribution
        # does not clearly exceed its penalty cost (slack of half the penalty
        # saving, which only ever covers sub-penalty-scale weights).
        # Pointless without a penalty; repeated because one removal can
        # unblock another.
        for _ in range(3 if lam > 0 else 0):
            snapped = False
            for idx in np.argsort(v):
                if idx == anchor or v[idx] == 0.0:
                    continue
                v_try = v.copy()
                v_try[idx] = 0.0
                if not np.any(v_try > 0.0):
                    continue
                w_try = _solve_w_fast(x1, x0, v_try, w, opts)
                obj_try = composite(v_try, w_try)
                if obj_try <= objective + 0.5 * lam * v[idx] + 1e-12 * scale:
                    v, w, objective = v_try, w_try, obj_try
                    snapped = True
            if not snapped:
                break
        return v, w, objective

    def probe_reentry(v, w, objective):
        # At a degenerate lower solution the donor weights are not a smooth
        # function of v, so gradient steps can miss profitable re-entries;
        # test zeroed weights directly.  Only material improvements count:
        # the probe exists to escape discontinuity-induced stuck states, not
        # to re-litigate marginal weights the descent already weighed.
        best = None
        floor = objective - 0.01 * scale
        for idx in range(k):
            if idx == anchor or v[idx] != 0.0:
                continue
            for delta in (0.01, 0.1, 1.0):
                v_try = v.copy()
                v_try[idx] = delta
                w_try = _solve_w_fast(x1, x0, v_try, w, opts)
                obj_try = composite(v_try, w_try)
                if obj_try < floor and (best is None or obj_try < best[2]):
                    best = (v_try, w_try, obj_try)
        return best

    step = 1.0
    for _ in range(3):
        v, w, objective, step = descend(v, w, objective, step)
        v, w, objective = snap_zeros(v, w, objective)
        entered = probe_reentry(v, w, objective)
        if entered is None:
            break
        v, w, objective = entered

    final = solve_lower(v, x1, x0, opts)
    return (
        PredictorWeights(values=v, anchor=anchor, rescaled=False),
        final.w,
    )


def default_lambda_grid(scale: float, opts: SolverOptions | None = None) -> np.ndarray:
    """Zero plus log-spaced penalties scaled by the unpenalized validation MSE."""
    opts = opts or SolverOptions()
    scale = float(scale) if scale > 0 else 1.0
    grid = np.geomspace(opts.grid_lo * scale, opts.grid_hi * scale, opts.grid_points)
    return np.concatenate([[0.0], grid])


def lambda_path(
    design: DesignMatrices,
    grid,
    anchor: int,
    opts: SolverOptions | None = None,
    init: PredictorWeights | np.ndarray | None = None,
    outcome_window: str = "train",
) -> list[LambdaPathEntry]:
    """Evaluate the penalty grid in order, each point continuing from the
    previous point's weights (the weights are initialized once, before the
    loop).  Sequential by design: grid points are a homotopy, not
    independent problems."""
    opts = opts or SolverOptions()
    grid = np.asarray(list(grid), dtype=np.float64)
    if grid.size == 0:
        raise ConfigError("penalty grid must be nonempty")
    if np.any(grid < 0):
        raise ConfigError("penalty grid values must be nonnegative")

    entries = []
    carry = init
    for lam in grid:
        try:
            v_raw, w_joint = joint_penalized_step(
                design, float(lam), anchor, init=carry, opts=opts,
                outcome_window=outcome_window,
            )
            v_scaled = rescale_v(v_raw)
            refit = solve_lower(v_scaled, design.x1_train, design.x0_train, opts)
        except SolverError as err:
            raise SolverError(f"penalty {lam:g}: {err}", residual=err.residual) from err
        carry = v_raw
        entries.append(
            LambdaPathEntry(
                lam=float(lam),
                v=v_scaled,
                w=refit.w,
                val_mse=_val_mse(design, refit.w.values),
                zero_set=frozenset(v_scaled.zero_set(opts.zero_threshold)),
                v_raw=v_raw,
                degenerate=refit.degenerate,
            )
        )
    return entries
