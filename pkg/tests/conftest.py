import numpy as np
import pytest

from sparse_sc.panel import LagSpec, PanelDataset, PredictorSpec


@pytest.fixture
def toy_panel():
    """3 units x 6 periods, tv=2, t0=4; hand-enterable numbers."""
    outcomes = np.array([
        [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        [1.5, 2.5, 3.5, 4.5, 5.5, 6.5],
        [0.5, 1.0, 2.0, 3.0, 4.0, 5.0],
    ])
    return PanelDataset(
        units=["a", "b", "c"],
        times=[1, 2, 3, 4, 5, 6],
        outcomes=outcomes,
        predictors={
            "income": np.array([10.0, 12.0, 8.0]),
            "price": np.array([
                [1.0, 1.1, 1.2, 1.3, 1.4, 1.5],
                [2.0, 2.1, 2.2, 2.3, 2.4, 2.5],
                [3.0, 3.1, 3.2, 3.3, 3.4, 3.5],
            ]),
        },
        treated_unit=0,
        t0=4,
        tv=2,
    )


def build_perfect_panel(n_donors=4, n_periods=8, t0=6, tv=3, seed=5):
    """Treated unit is exactly the average of the first two donors, in both
    outcomes and predictors; no noise anywhere."""
    rng = np.random.default_rng(seed)
    donor_outcomes = rng.normal(10.0, 2.0, size=(n_donors, n_periods)).cumsum(axis=1)
    treated = 0.5 * (donor_outcomes[0] + donor_outcomes[1])
    outcomes = np.vstack([treated, donor_outcomes])
    cov = rng.uniform(0.0, 1.0, size=(n_donors, 2))
    cov = np.vstack([0.5 * (cov[0] + cov[1]), cov])
    return PanelDataset(
        units=[f"u{i}" for i in range(n_donors + 1)],
        times=list(range(n_periods)),
        outcomes=outcomes,
        predictors={"c1": cov[:, 0], "c2": cov[:, 1]},
        treated_unit=0,
        t0=t0,
        tv=tv,
    )


@pytest.fixture
def perfect_panel():
    return build_perfect_panel()


@pytest.fixture
def perfect_spec():
    return PredictorSpec(
        covariates=("c1", "c2"),
        lags=(LagSpec.single(0), LagSpec.single(1), LagSpec.single(2)),
    )
