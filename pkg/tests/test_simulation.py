import numpy as np
import pytest

from sparse_sc.exceptions import ConfigError, SingularFactorGramError, StudyError
from sparse_sc.panel import PanelDataset
from sparse_sc.simulation import (
    FactorModelConfig,
    PanelTruth,
    SimulatedPanel,
    bias_bound_oracle,
    mad,
    mse_rate_oracle,
    predictor_match_mse,
    run_study,
    simulate_panel,
    study_predictor_spec,
    summarize_records,
)


class TestSimulatePanel:
    def test_degenerate_model_is_flat_intercept(self):
        cfg = FactorModelConfig(noise_sd=0.0, useful_coef=0.0, factor_scale=0.0,
                                seed=1)
        sim = simulate_panel(cfg)
        assert np.allclose(sim.panel.outcomes, cfg.intercept)

    def test_default_design_counts(self):
        cfg = FactorModelConfig(seed=2)
        sim = simulate_panel(cfg)
        assert sim.panel.n_units == 21
        assert sim.panel.n_periods == 30
        assert study_predictor_spec(cfg).n_predictors == 20

    def test_covariates_uniform_mean(self):
        # donors' covariates are iid U[0,1]; LLN check on ~1e5 draws
        cfg = FactorModelConfig(n_units=2001, n_factors=667, n_useful=25,
                                n_nuisance=25, seed=3)
        sim = simulate_panel(cfg)
        donor_draws = sim.truth.covariates[1:]
        assert donor_draws.size == 100_000
        assert donor_draws.mean() == pytest.approx(0.5, abs=0.005)

    def test_treated_is_exact_donor_average(self):
        sim = simulate_panel(FactorModelConfig(seed=4))
        z = sim.truth.covariates
        useful = sim.truth.useful_idx
        assert np.array_equal(z[0, useful], 0.5 * (z[1, useful] + z[2, useful]))

    def test_oracle_match_off_removes_privilege(self):
        sim = simulate_panel(FactorModelConfig(seed=4, oracle_match=False))
        z = sim.truth.covariates
        useful = sim.truth.useful_idx
        assert not np.allclose(z[0, useful], 0.5 * (z[1, useful] + z[2, useful]))

    def test_factor_groups_of_three(self):
        sim = simulate_panel(FactorModelConfig(seed=5))
        loadings = sim.truth.loadings
        assert loadings.shape == (21, 7)
        assert np.array_equal(loadings[0], loadings[1])
        assert np.array_equal(loadings[0], loadings[2])
        assert loadings.sum() == 21  # one-hot rows
        assert not np.array_equal(loadings[2], loadings[3])

    def test_ar_coefficient_recovered(self):
        cfg = FactorModelConfig(n_units=3, n_factors=1, group_size=3,
                                n_periods=6000, t0=5000, tv=2500, seed=6)
        sim = simulate_panel(cfg)
        series = sim.truth.factors[:, 0]
        lag_corr = np.corrcoef(series[:-1], series[1:])[0, 1]
        assert lag_corr == pytest.approx(0.5, abs=0.05)

    def test_stationary_initialization(self):
        # pooled first-period values across many factors match the
        # stationary sd 1/sqrt(1-rho^2)
        cfg = FactorModelConfig(n_units=3000, n_factors=1000, n_periods=30,
                                seed=7)
        sim = simulate_panel(cfg)
        sd0 = sim.truth.factors[0].std()
        assert sd0 == pytest.approx(1.0 / np.sqrt(1 - 0.25), rel=0.1)

    def test_reproducible_bit_for_bit(self):
        a = simulate_panel(FactorModelConfig(seed=[9, 1]))
        b = simulate_panel(FactorModelConfig(seed=[9, 1]))
        assert np.array_equal(a.panel.outcomes, b.panel.outcomes)
        assert np.array_equal(a.truth.factors, b.truth.factors)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            FactorModelConfig(ar_coef=1.0)
        with pytest.raises(ConfigError):
            FactorModelConfig(tv=20, t0=20)
        with pytest.raises(ConfigError):
            FactorModelConfig(n_lags=11)  # exceeds tv
        with pytest.raises(ConfigError):
            FactorModelConfig(n_useful=0, n_nuisance=0)
        with pytest.raises(ConfigError):
            FactorModelConfig(group_size=3, n_factors=6)  # 18 < 21 units
        with pytest.raises(ConfigError):
            FactorModelConfig.from_dict({"bogus": 1})


class TestMad:
    def test_identical_series(self):
        assert mad([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_hand_value(self):
        assert mad([0.0, 2.0], [1.0, 1.0]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            mad([1.0], [1.0, 2.0])

    def test_jensen_bound_vs_rmse(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = rng.normal(size=50)
            b = rng.normal(size=50)
            rmse = float(np.sqrt(np.mean((a - b) ** 2)))
            assert mad(a, b) <= rmse + 1e-12


class TestRateOracle:
    def test_reported_values(self):
        sparse, standard = mse_rate_oracle(20, 1, 20, 1.0)
        assert sparse == pytest.approx(np.sqrt(2 * np.log(20)) / 20, abs=1e-12)
        assert sparse == pytest.approx(0.1224, abs=5e-4)
        assert standard == pytest.approx(np.sqrt(2 * np.log(20) / 20), abs=1e-12)
        assert standard == pytest.approx(0.5473, abs=5e-4)

    def test_rates_coincide_when_all_useful(self):
        sparse, standard = mse_rate_oracle(16, 16, 25, 0.7)
        assert sparse == pytest.approx(standard, rel=1e-12)

    def test_doubling_donors_shared_factor(self):
        s1, t1 = mse_rate_oracle(20, 5, 10, 1.0)
        s2, t2 = mse_rate_oracle(20, 5, 20, 1.0)
        shared = np.sqrt(np.log(20) / np.log(10))
        assert s2 / s1 == pytest.approx(shared, rel=1e-12)
        assert t2 / t1 == pytest.approx(shared, rel=1e-12)

    def test_domain_errors(self):
        with pytest.raises(ConfigError):
            mse_rate_oracle(3, 4, 20, 1.0)
        with pytest.raises(ConfigError):
            mse_rate_oracle(4, 0, 20, 1.0)
        with pytest.raises(ConfigError):
            mse_rate_oracle(4, 2, 1, 1.0)
        with pytest.raises(ConfigError):
            mse_rate_oracle(4, 2, 20, 0.0)


def constant_factor_sim(t_total=14, t0=10):
    """Hand-checkable truth: one factor identically 1, three units."""
    outcomes = np.arange(3 * t_total, dtype=float).reshape(3, t_total)
    panel = PanelDataset(
        units=["t", "a", "b"], times=list(range(t_total)), outcomes=outcomes,
        predictors={}, treated_unit=0, t0=t0, tv=5,
    )
    truth = PanelTruth(
        covariates=np.array([[0.5], [0.4], [0.6]]),
        loadings=np.ones((3, 1)),
        factors=np.ones((t_total, 1)),
        useful_idx=np.arange(1),
        useful_coef=1.0,
        oracle_weights=np.array([0.5, 0.5]),
        true_effect=0.0,
        noise_sd=0.0,
    )
    return SimulatedPanel(panel=panel, truth=truth)


class TestBiasBound:
    def test_perfect_fit_is_zero(self):
        cfg = FactorModelConfig(noise_sd=0.0, seed=13)
        sim = simulate_panel(cfg)
        bound = bias_bound_oracle(sim, sim.truth.oracle_weights)
        assert bound.total == pytest.approx(0.0, abs=1e-9)

    def test_constant_factor_hand_value(self):
        # F=1, factors identically 1, T0=10: smallest Gram eigenvalue is 10,
        # max |factor| is 1, so gamma = 1/10
        sim = constant_factor_sim()
        w = np.array([0.5, 0.5])
        bound = bias_bound_oracle(sim, w)
        assert bound.gamma == pytest.approx(0.1, abs=1e-12)
        panel = sim.panel
        y_gaps = np.abs(
            panel.treated_outcomes()[:10] - panel.donor_outcomes()[:10] @ w
        ).sum()
        z = sim.truth.covariates
        z_gap = abs(z[0, 0] - w @ z[1:, 0])
        expected = 0.01 * y_gaps + abs(1.0 * (1 - 0.01)) * z_gap
        assert bound.outcome_term == pytest.approx(0.01 * y_gaps, rel=1e-12)
        assert bound.total == pytest.approx(expected, rel=1e-12)
        assert bound.remainder == pytest.approx(0.1, abs=1e-15)

    def test_singular_factor_gram(self):
        sim = constant_factor_sim()
        broken = SimulatedPanel(
            panel=sim.panel,
            truth=PanelTruth(
                covariates=sim.truth.covariates,
                loadings=sim.truth.loadings,
                factors=np.zeros_like(sim.truth.factors),
                useful_idx=sim.truth.useful_idx,
                useful_coef=1.0,
                oracle_weights=sim.truth.oracle_weights,
                true_effect=0.0,
                noise_sd=0.0,
            ),
        )
        with pytest.raises(SingularFactorGramError):
            bias_bound_oracle(broken, np.array([0.5, 0.5]))


def records_equal(left, right):
    if len(left) != len(right):
        return False
    for a, b in zip(left, right):
        if a.keys() != b.keys():
            return False
        for key in a:
            x, y = a[key], b[key]
            if isinstance(x, float) and isinstance(y, float):
                if not (x == y or (np.isnan(x) and np.isnan(y))):
                    return False
            elif x != y:
                return False
    return True


class TestRunStudy:
    def test_noiseless_perfect_fit_zero_post_mse(self):
        cfg = FactorModelConfig(noise_sd=0.0, n_useful=2, n_nuisance=1,
                                n_units=9, n_factors=3, n_lags=3,
                                n_periods=16, t0=10, tv=5)
        res = run_study(cfg, ["sparse"], 1, seed=5, workers=1)
        assert res.summary["sparse"]["post_mse"]["mean"] <= 1e-10

    def test_parallel_matches_serial(self):
        cfg = FactorModelConfig(n_units=9, n_factors=3, n_useful=2,
                                n_nuisance=1, n_lags=3, n_periods=16,
                                t0=10, tv=5)
        serial = run_study(cfg, ["scm_fixed", "did"], 6, seed=8, workers=1)
        parallel = run_study(cfg, ["scm_fixed", "did"], 6, seed=8, workers=2)
        assert records_equal(serial.records, parallel.records)
        assert serial.summary == parallel.summary

    def test_deterministic_reruns(self):
        cfg = FactorModelConfig(n_units=9, n_factors=3, n_useful=2,
                                n_nuisance=1, n_lags=3, n_periods=16,
                                t0=10, tv=5)
        first = run_study(cfg, ["scm_fixed"], 4, seed=9, workers=2)
        second = run_study(cfg, ["scm_fixed"], 4, seed=9, workers=2)
        assert records_equal(first.records, second.records)

    def test_unknown_estimator_rejected(self):
        with pytest.raises(ConfigError):
            run_study(FactorModelConfig(), ["nope"], 1, seed=1)

    def test_failures_abort_when_above_tolerance(self, monkeypatch):
        import sparse_sc.simulation as sim_mod

        def explode(*args, **kwargs):
            raise RuntimeError("boom")

        monkeypatch.setattr(sim_mod, "fit_estimator", explode)
        with pytest.raises(StudyError):
            run_study(FactorModelConfig(), ["scm_fixed"], 2, seed=1, workers=1)

    def test_summary_math(self):
        records = [
            {"estimator": "x", "post_mse": 1.0, "rep": 0},
            {"estimator": "x", "post_mse": 3.0, "rep": 1},
        ]
        summary = summarize_records(records)
        block = summary["x"]["post_mse"]
        assert block["mean"] == 2.0
        assert block["mc_se"] == pytest.approx(np.std([1, 3], ddof=1) / np.sqrt(2))
        assert block["q50"] == 2.0

    def test_predictor_match_mse_definition(self):
        sim = constant_factor_sim()
        w = np.array([1.0, 0.0])
        z = sim.truth.covariates
        expected = float((z[0, 0] - z[1, 0]) ** 2)  # k = 1
        assert predictor_match_mse(sim, w) == pytest.approx(expected, abs=1e-15)
        vs_oracle = predictor_match_mse(sim, w, relative_to_oracle=True)
        oracle_target = 0.5 * (z[1, 0] + z[2, 0])
        assert vs_oracle == pytest.approx((oracle_target - z[1, 0]) ** 2, abs=1e-15)
