"""Panel data model, CSV ingestion, and design-matrix construction.

A panel holds outcomes for J+1 units over T periods plus named predictors.
Unit 0 is the treated unit internally; the remaining J units form the donor
pool.  The first ``tv`` periods are the training window, periods ``tv..t0-1``
the validation window, and ``t0..T-1`` the post-treatment window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import (
    ConfigError,
    DimensionError,
    DuplicateObservationError,
    MissingDataError,
    ParseError,
)

_STD_EPS = 1e-12


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PanelDataset:
    """Complete balanced panel with treatment metadata.

    outcomes has shape (J+1, T); predictors maps a name to either a
    (J+1,) unit-level vector or a (J+1, T) time-varying matrix.
    """

    units: list[str]
    times: list
    outcomes: np.ndarray
    predictors: dict[str, np.ndarray]
    treated_unit: int
    t0: int
    tv: int

    def __post_init__(self):
        n_units = len(self.units)
        n_periods = len(self.times)
        outcomes = np.asarray(self.outcomes, dtype=np.float64)
        if outcomes.shape != (n_units, n_periods):
            raise DimensionError(
                f"outcomes shape {outcomes.shape} != ({n_units}, {n_periods})"
            )
        if not np.all(np.isfinite(outcomes)):
            bad = np.argwhere(~np.isfinite(outcomes))
            cells = [(self.units[i], self.times[t]) for i, t in bad]
            raise MissingDataError(cells)
        if not 0 <= self.treated_unit < n_units:
            raise ConfigError(f"treated unit index {self.treated_unit} out of range")
        if n_units < 3:
            raise ConfigError("need a treated unit plus at least 2 donors")
        if not 1 <= self.tv < self.t0 < n_periods:
            raise ConfigError(
                f"require 1 <= tv < t0 < T, got tv={self.tv}, t0={self.t0}, T={n_periods}"
            )
        object.__setattr__(self, "outcomes", _freeze(outcomes))
        preds = {}
        for name, values in self.predictors.items():
            values = np.asarray(values, dtype=np.float64)
            if values.ndim == 1:
                if values.shape != (n_units,):
                    raise DimensionError(f"predictor {name!r}: expected {n_units} values")
            elif values.shape != (n_units, n_periods):
                raise DimensionError(
                    f"predictor {name!r}: shape {values.shape} != ({n_units}, {n_periods})"
                )
            if not np.all(np.isfinite(values)):
                raise MissingDataError([(name, "predictor has non-finite values")])
            preds[name] = _freeze(values)
        object.__setattr__(self, "predictors", preds)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_donors(self) -> int:
        return len(self.units) - 1

    @property
    def n_periods(self) -> int:
        return len(self.times)

    @property
    def donor_indices(self) -> np.ndarray:
        idx = [i for i in range(self.n_units) if i != self.treated_unit]
        return np.asarray(idx, dtype=np.intp)

    @property
    def donor_units(self) -> list[str]:
        return [self.units[i] for i in self.donor_indices]

    def donor_outcomes(self) -> np.ndarray:
        """Donor outcome matrix with shape (T, J); column order follows donor_units."""
        return self.outcomes[self.donor_indices].T

    def treated_outcomes(self) -> np.ndarray:
        return self.outcomes[self.treated_unit]

    def subpanel_without_treated(self, new_treated: int) -> "PanelDataset":
        """Drop the true treated unit and mark donor position ``new_treated`` as treated.

        Used by placebo runs; ``new_treated`` indexes into the donor pool.
        """
        keep = self.donor_indices
        preds = {
            name: (v[keep] if v.ndim == 1 else v[keep, :])
            for name, v in self.predictors.items()
        }
        return PanelDataset(
            units=[self.units[i] for i in keep],
            times=list(self.times),
            outcomes=np.array(self.outcomes[keep, :]),
            predictors=preds,
            treated_unit=int(new_treated),
            t0=self.t0,
            tv=self.tv,
        )

    def to_frame(self) -> pd.DataFrame:
        """Long-format frame with one row per (unit, time)."""
        rows = {
            "unit": np.repeat(self.units, self.n_periods),
            "time": list(self.times) * self.n_units,
            "outcome": self.outcomes.ravel(),
        }
        for name, values in self.predictors.items():
            if values.ndim == 1:
                rows[name] = np.repeat(values, self.n_periods)
            else:
                rows[name] = values.ravel()
        return pd.DataFrame(rows)

    def write_csv(self, path) -> None:
        """Write a long CSV that reloads bit-for-bit (floats via repr)."""
        frame = self.to_frame()
        float_cols = [c for c in frame.columns if frame[c].dtype.kind == "f"]
        out = frame.copy()
        for col in float_cols:
            out[col] = [repr(float(x)) for x in frame[col]]
        out.to_csv(path, index=False)


@dataclass
class PanelSchema:
    """Column names and treatment metadata used to read a panel CSV."""

    treated_unit: str
    t0: int
    tv: int
    unit_col: str = "unit"
    time_col: str = "time"
    outcome_col: str = "outcome"
    layout: str = "long"
    predictor_cols: list[str] | None = None
    unit_order: list[str] | None = None
    time_order: list | None = None

    _KEYS = {
        "treated_unit", "t0", "tv", "unit_col", "time_col", "outcome_col",
        "layout", "predictor_cols", "unit_order", "time_order",
    }

    @classmethod
    def from_dict(cls, raw: dict) -> "PanelSchema":
        unknown = set(raw) - cls._KEYS
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        for key in ("treated_unit", "t0", "tv"):
            if key not in raw:
                raise ConfigError(f"schema is missing required key {key!r}")
        return cls(**raw)

    def __post_init__(self):
        if self.layout not in ("long", "wide"):
            raise ConfigError(f"layout must be 'long' or 'wide', got {self.layout!r}")


def _coerce_time_labels(labels):
    """Sort time labels numerically when they all parse as numbers."""
    try:
        numeric = [float(x) for x in labels]
    except (TypeError, ValueError):
        return sorted(labels, key=str)
    as_int = [int(v) if float(v).is_integer() else v for v in numeric]
    order = np.argsort(numeric, kind="stable")
    return [as_int[i] for i in order]


def _parse_float(value, row_number, column):
    if isinstance(value, float) and math.isnan(value):
        return math.nan
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ParseError(f"non-numeric value {value!r} in column {column!r}", row=row_number)


def load_panel(path, schema: PanelSchema) -> PanelDataset:
    """Read a panel CSV and return a validated PanelDataset.

    Long layout expects columns ``unit,time,outcome,<predictor...>``; wide
    layout expects one row per unit with one outcome column per period.
    """
    raw = pd.read_csv(path, dtype=str, keep_default_na=True, skipinitialspace=True)
    if schema.layout == "wide":
        return _load_wide(raw, schema)
    return _load_long(raw, schema)


def _ordered_units(schema: PanelSchema, observed) -> list[str]:
    if schema.unit_order is not None:
        missing = set(observed) - set(schema.unit_order)
        if missing:
            raise ConfigError(f"unit_order is missing units: {sorted(missing)}")
        return [u for u in schema.unit_order if u in set(observed)]
    return sorted(set(observed))


def _load_long(raw: pd.DataFrame, schema: PanelSchema) -> PanelDataset:
    for col in (schema.unit_col, schema.time_col, schema.outcome_col):
        if col not in raw.columns:
            raise ConfigError(f"column {col!r} not found in CSV")
    pred_cols = schema.predictor_cols
    if pred_cols is None:
        pred_cols = [
            c for c in raw.columns
            if c not in (schema.unit_col, schema.time_col, schema.outcome_col)
        ]
    else:
        for col in pred_cols:
            if col not in raw.columns:
                raise ConfigError(f"predictor column {col!r} not found in CSV")

    units = _ordered_units(schema, raw[schema.unit_col])
    if schema.time_order is not None:
        times = list(schema.time_order)
    else:
        times = _coerce_time_labels(raw[schema.time_col].unique())
    unit_pos = {u: i for i, u in enumerate(units)}
    time_pos = {str(t): i for i, t in enumerate(times)}

    n_units, n_periods = len(units), len(times)
    outcomes = np.full((n_units, n_periods), np.nan)
    predictors = {name: np.full((n_units, n_periods), np.nan) for name in pred_cols}
    seen = set()
    for row_number, rec in enumerate(raw.itertuples(index=False), start=2):
        rec = rec._asdict()
        unit = rec[schema.unit_col]
        time_key = str(rec[schema.time_col])
        if unit not in unit_pos:
            raise ConfigError(f"unit {unit!r} not in the configured unit order")
        if time_key not in time_pos:
            raise ConfigError(f"time {time_key!r} not in the configured time order")
        cell = (unit_pos[unit], time_pos[time_key])
        if cell in seen:
            raise DuplicateObservationError(
                f"duplicate observation for unit {unit!r} at time {time_key!r}"
            )
        seen.add(cell)
        value = _parse_float(rec[schema.outcome_col], row_number, schema.outcome_col)
        if math.isnan(value):
            raise MissingDataError([(unit, time_key)])
        outcomes[cell] = value
        for name in pred_cols:
            predictors[name][cell] = _parse_float(rec[name], row_number, name)

    missing = np.argwhere(np.isnan(outcomes))
    if missing.size:
        raise MissingDataError([(units[i], times[t]) for i, t in missing])
    for name, values in predictors.items():
        if np.isnan(values).any():
            raise MissingDataError([(name, "predictor column has missing cells")])

    if schema.treated_unit not in unit_pos:
        raise ConfigError(f"treated unit {schema.treated_unit!r} not found among units")
    return PanelDataset(
        units=units,
        times=times,
        outcomes=outcomes,
        predictors=predictors,
        treated_unit=unit_pos[schema.treated_unit],
        t0=schema.t0,
        tv=schema.tv,
    )


def _load_wide(raw: pd.DataFrame, schema: PanelSchema) -> PanelDataset:
    if schema.unit_col not in raw.columns:
        raise ConfigError(f"column {schema.unit_col!r} not found in CSV")
    pred_cols = schema.predictor_cols or []
    for col in pred_cols:
        if col not in raw.columns:
            raise ConfigError(f"predictor column {col!r} not found in CSV")
    time_cols = [c for c in raw.columns if c != schema.unit_col and c not in pred_cols]
    if schema.time_order is not None:
        missing = [t for t in schema.time_order if str(t) not in set(time_cols)]
        if missing:
            raise ConfigError(f"time columns not found: {missing}")
        times = list(schema.time_order)
    else:
        times = _coerce_time_labels(time_cols)

    dupes = raw[schema.unit_col][raw[schema.unit_col].duplicated()]
    if len(dupes):
        raise DuplicateObservationError(f"duplicate unit rows: {sorted(set(dupes))}")
    units = _ordered_units(schema, raw[schema.unit_col])
    frame = raw.set_index(schema.unit_col).loc[units]

    n_units, n_periods = len(units), len(times)
    outcomes = np.full((n_units, n_periods), np.nan)
    for j, t in enumerate(times):
        col = str(t)
        for i, unit in enumerate(units):
            row_number = int(raw.index[raw[schema.unit_col] == unit][0]) + 2
            value = _parse_float(frame.at[unit, col], row_number, col)
            if math.isnan(value):
                raise MissingDataError([(unit, t)])
            outcomes[i, j] = value
    predictors = {}
    for name in pred_cols:
        vec = np.array([
            _parse_float(frame.at[unit, name], None, name) for unit in units
        ])
        if np.isnan(vec).any():
            raise MissingDataError([(name, "predictor column has missing cells")])
        predictors[name] = vec

    if schema.treated_unit not in set(units):
        raise ConfigError(f"treated unit {schema.treated_unit!r} not found among units")
    return PanelDataset(
        units=units,
        times=times,
        outcomes=outcomes,
        predictors=predictors,
        treated_unit=units.index(schema.treated_unit),
        t0=schema.t0,
        tv=schema.tv,
    )


@dataclass(frozen=True)
class LagSpec:
    """One outcome-lag predictor: a weighted combination of outcome periods.

    ``offsets`` maps an offset counted back from the end of the active window
    (0 = last period of the window) to a weight; these re-anchor when the
    window shifts.  ``periods`` maps absolute time labels to weights and is
    window-invariant.  Exactly one of the two must be given.
    """

    name: str
    offsets: dict[int, float] | None = None
    periods: dict | None = None

    def __post_init__(self):
        if (self.offsets is None) == (self.periods is None):
            raise ConfigError(f"lag {self.name!r}: give exactly one of offsets/periods")
        if self.offsets is not None:
            if not self.offsets:
                raise ConfigError(f"lag {self.name!r}: empty offsets")
            if any(o < 0 for o in self.offsets):
                raise ConfigError(f"lag {self.name!r}: offsets must be >= 0")
        if self.periods is not None and not self.periods:
            raise ConfigError(f"lag {self.name!r}: empty periods")

    @staticmethod
    def single(offset: int, name: str | None = None) -> "LagSpec":
        return LagSpec(name=name or f"y_lag{offset}", offsets={int(offset): 1.0})

    @staticmethod
    def window_mean(length: int, name: str | None = None) -> "LagSpec":
        if length < 1:
            raise ConfigError("window mean length must be >= 1")
        weight = 1.0 / length
        return LagSpec(
            name=name or f"y_mean{length}",
            offsets={o: weight for o in range(length)},
        )

    @staticmethod
    def at_period(label, name: str | None = None) -> "LagSpec":
        return LagSpec(name=name or f"y@{label}", periods={label: 1.0})


@dataclass(frozen=True)
class PredictorSpec:
    """Which covariates and outcome lags form the design-matrix rows."""

    covariates: tuple[str, ...] = ()
    lags: tuple[LagSpec, ...] = ()
    aggregation: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "lags", tuple(self.lags))
        if self.aggregation != "mean":
            raise ConfigError(f"unsupported aggregation {self.aggregation!r}")
        if self.n_predictors < 1:
            raise ConfigError("need at least one covariate or lag predictor")

    @property
    def n_predictors(self) -> int:
        return len(self.covariates) + len(self.lags)

    @property
    def predictor_names(self) -> list[str]:
        return list(self.covariates) + [lag.name for lag in self.lags]


@dataclass(frozen=True)
class DesignMatrices:
    """Standardized treated/donor design rows plus the outcome windows.

    Row k of every matrix refers to predictor_names[k].  Standardization
    constants come from the pooled treated+donor training rows and are
    applied to the validation rows as well.
    """

    x1_train: np.ndarray
    x0_train: np.ndarray
    x1_val: np.ndarray
    x0_val: np.ndarray
    y1_train: np.ndarray
    y0_train: np.ndarray
    y1_val: np.ndarray
    y0_val: np.ndarray
    predictor_names: list[str]
    row_means: np.ndarray
    row_sds: np.ndarray
    zero_variance: list[str] = field(default_factory=list)
    shifted: bool = False
    standardized: bool = True

    def __post_init__(self):
        k, j = self.x0_train.shape
        if self.x1_train.shape != (k,) or self.x1_val.shape != (k,):
            raise DimensionError("treated design vectors do not match K")
        if self.x0_val.shape != (k, j):
            raise DimensionError("validation donor design does not match (K, J)")
        for name in ("x1_train", "x0_train", "x1_val", "x0_val"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DimensionError(f"{name} contains non-finite entries")

    @property
    def n_predictors(self) -> int:
        return self.x0_train.shape[0]

    @property
    def n_donors(self) -> int:
        return self.x0_train.shape[1]

    @property
    def n_validation_periods(self) -> int:
        return len(self.y1_val)


def _window_bounds(panel: PanelDataset, shifted: bool) -> tuple[int, int]:
    if shifted:
        return panel.t0 - panel.tv, panel.t0
    return 0, panel.tv


def _lag_row(panel: PanelDataset, lag: LagSpec, lo: int, hi: int) -> np.ndarray:
    """Evaluate one lag combination for every unit over window [lo, hi)."""
    if lag.offsets is not None:
        row = np.zeros(panel.n_units)
        for offset, weight in lag.offsets.items():
            pos = hi - 1 - int(offset)
            if pos < lo:
                raise ConfigError(
                    f"lag {lag.name!r}: offset {offset} does not fit a window of "
                    f"length {hi - lo}"
                )
            row += weight * panel.outcomes[:, pos]
        return row
    row = np.zeros(panel.n_units)
    labels = {str(t): i for i, t in enumerate(panel.times)}
    for label, weight in lag.periods.items():
        if str(label) not in labels:
            raise ConfigError(f"lag {lag.name!r}: period {label!r} not in panel times")
        pos = labels[str(label)]
        if pos >= panel.t0:
            raise ConfigError(f"lag {lag.name!r}: period {label!r} is post-treatment")
        row += weight * panel.outcomes[:, pos]
    return row


def _raw_rows(panel: PanelDataset, spec: PredictorSpec, lo: int, hi: int) -> np.ndarray:
    rows = []
    for name in spec.covariates:
        if name not in panel.predictors:
            raise ConfigError(f"unknown predictor {name!r}")
        values = panel.predictors[name]
        if values.ndim == 1:
            rows.append(values)
        else:
            rows.append(values[:, lo:hi].mean(axis=1))
    for lag in spec.lags:
        rows.append(_lag_row(panel, lag, lo, hi))
    return np.vstack(rows)


def build_design(
    panel: PanelDataset,
    spec: PredictorSpec,
    shifted: bool = False,
    standardize: bool = True,
    drop_zero_variance: bool = False,
) -> DesignMatrices:
    """Assemble train/validation design matrices from a predictor spec.

    Training rows come from the first ``tv`` periods (the last ``tv``
    pre-treatment periods when ``shifted``); validation rows from periods
    ``tv..t0-1``.  Rows are standardized so the pooled treated+donor
    training values have mean 0 and sd 1; zero-variance rows are kept but
    reported (see ``zero_variance``) unless ``drop_zero_variance``.
    """
    lo, hi = _window_bounds(panel, shifted)
    train_rows = _raw_rows(panel, spec, lo, hi)
    val_rows = _raw_rows(panel, spec, panel.tv, panel.t0)

    names = spec.predictor_names
    means = train_rows.mean(axis=1)
    sds = train_rows.std(axis=1)
    flat = [names[k] for k in range(len(names)) if sds[k] <= _STD_EPS]

    keep = np.ones(len(names), dtype=bool)
    if drop_zero_variance and flat:
        keep = sds > _STD_EPS
        if not keep.any():
            raise ConfigError("all predictor rows have zero variance")

    if standardize:
        divisor = np.where(sds > _STD_EPS, sds, 1.0)
        train_rows = (train_rows - means[:, None]) / divisor[:, None]
        val_rows = (val_rows - means[:, None]) / divisor[:, None]

    train_rows = train_rows[keep]
    val_rows = val_rows[keep]
    kept_names = [n for n, k in zip(names, keep) if k]

    donors = panel.donor_indices
    treated = panel.treated_unit
    outcomes = panel.outcomes
    return DesignMatrices(
        x1_train=train_rows[:, treated].copy(),
        x0_train=train_rows[:, donors].copy(),
        x1_val=val_rows[:, treated].copy(),
        x0_val=val_rows[:, donors].copy(),
        y1_train=outcomes[treated, lo:hi].copy(),
        y0_train=outcomes[donors, lo:hi].T.copy(),
        y1_val=outcomes[treated, panel.tv:panel.t0].copy(),
        y0_val=outcomes[donors, panel.tv:panel.t0].T.copy(),
        predictor_names=kept_names,
        row_means=means[keep],
        row_sds=sds[keep],
        zero_variance=flat,
        shifted=shifted,
        standardized=standardize,
    )
