import json

import numpy as np
import pytest

from conftest import build_perfect_panel
from sparse_sc.cli import main


@pytest.fixture
def panel_csv(tmp_path):
    panel = build_perfect_panel(n_donors=5, n_periods=10, t0=7, tv=4)
    path = tmp_path / "panel.csv"
    panel.write_csv(path)
    return path


def estimate_config(panel_csv):
    return {
        "data": {
            "path": str(panel_csv),
            "schema": {"treated_unit": "u0", "t0": 7, "tv": 4},
        },
        "predictors": {
            "covariates": ["c1", "c2"],
            "lags": [{"offsets": {"0": 1.0}}, {"offsets": {"1": 1.0}}],
        },
        "estimators": ["sparse", "scm_fixed", "did"],
        "solver": {"anchor": 0},
        "seed": 7,
    }


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


def read_outputs(out_dir, names):
    return {name: (out_dir / name).read_bytes() for name in names}


class TestEstimate:
    def test_writes_reports_and_exits_zero(self, tmp_path, panel_csv, capsys):
        config = write_config(tmp_path, estimate_config(panel_csv))
        out = tmp_path / "out"
        code = main(["estimate", "--config", str(config), "--out", str(out)])
        assert code == 0
        fit = json.loads((out / "fit.json").read_text())
        assert set(fit["estimators"]) == {"sparse", "scm_fixed", "did"}
        assert fit["estimators"]["sparse"]["att"] == pytest.approx(0.0, abs=1e-6)
        effects = (out / "effects.csv").read_text().splitlines()
        assert effects[0] == "estimator,time,actual,counterfactual,gap,post"
        assert len(effects) == 1 + 3 * 10
        summary = (out / "summary.txt").read_text()
        assert "sparse" in summary and "did" in summary
        assert "estimate: wrote" in capsys.readouterr().out

    def test_byte_identical_reruns(self, tmp_path, panel_csv):
        config = write_config(tmp_path, estimate_config(panel_csv))
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["estimate", "--config", str(config), "--out", str(out1), "--quiet"]) == 0
        assert main(["estimate", "--config", str(config), "--out", str(out2), "--quiet"]) == 0
        names = ["fit.json", "effects.csv", "summary.txt"]
        assert read_outputs(out1, names) == read_outputs(out2, names)

    def test_missing_predictor_column_exit_2(self, tmp_path, panel_csv, capsys):
        payload = estimate_config(panel_csv)
        payload["predictors"]["covariates"] = ["c1", "not_there"]
        config = write_config(tmp_path, payload)
        code = main(["estimate", "--config", str(config), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "not_there" in capsys.readouterr().err

    def test_unknown_config_key_exit_2(self, tmp_path, panel_csv, capsys):
        payload = estimate_config(panel_csv)
        payload["surprise"] = True
        config = write_config(tmp_path, payload)
        assert main(["estimate", "--config", str(config), "--out", str(tmp_path / "o")]) == 2
        assert "surprise" in capsys.readouterr().err

    def test_missing_config_file_exit_2(self, tmp_path):
        assert main(["estimate", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path)]) == 2


class TestSimulate:
    def simulate_config(self):
        return {
            "study": {
                "n_units": 9, "n_factors": 3, "n_useful": 2, "n_nuisance": 1,
                "n_lags": 3, "n_periods": 16, "t0": 10, "tv": 5,
            },
            "estimators": ["scm_fixed", "did"],
            "replications": 3,
            "solver": {},
            "seed": 11,
        }

    def test_outputs_and_determinism(self, tmp_path):
        config = write_config(tmp_path, self.simulate_config())
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        assert main(["simulate", "--config", str(config), "--out", str(out1), "--quiet"]) == 0
        assert main(["simulate", "--config", str(config), "--out", str(out2), "--quiet"]) == 0
        names = ["study.csv", "study_summary.json"]
        assert read_outputs(out1, names) == read_outputs(out2, names)
        summary = json.loads((out1 / "study_summary.json").read_text())
        assert summary["replications"] == 3
        assert set(summary["summary"]) == {"scm_fixed", "did"}
        rows = (out1 / "study.csv").read_text().splitlines()
        assert len(rows) == 1 + 3 * 2

    def test_invalid_ar_coefficient_exit_2(self, tmp_path, capsys):
        payload = self.simulate_config()
        payload["study"]["ar_coef"] = 1.0
        config = write_config(tmp_path, payload)
        assert main(["simulate", "--config", str(config), "--out", str(tmp_path / "o")]) == 2
        assert "stationarity" in capsys.readouterr().err

    def test_seed_required(self, tmp_path, capsys):
        payload = self.simulate_config()
        del payload["seed"]
        config = write_config(tmp_path, payload)
        assert main(["simulate", "--config", str(config), "--out", str(tmp_path / "o")]) == 2
        assert "seed" in capsys.readouterr().err

    def test_seed_flag_overrides_config(self, tmp_path):
        config = write_config(tmp_path, self.simulate_config())
        out1, out2, out3 = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        main(["simulate", "--config", str(config), "--out", str(out1), "--quiet"])
        main(["simulate", "--config", str(config), "--out", str(out2),
              "--seed", "99", "--quiet"])
        main(["simulate", "--config", str(config), "--out", str(out3),
              "--seed", "99", "--quiet"])
        assert (out1 / "study.csv").read_bytes() != (out2 / "study.csv").read_bytes()
        assert (out2 / "study.csv").read_bytes() == (out3 / "study.csv").read_bytes()


class TestPlacebo:
    def placebo_config(self, panel_csv):
        return {
            "data": {
                "path": str(panel_csv),
                "schema": {"treated_unit": "u0", "t0": 7, "tv": 4},
            },
            "predictors": {"covariates": ["c1"], "lags": [{"offsets": {"0": 1.0}}]},
            "estimator": "scm_fixed",
            "draws": 6,
            "solver": {},
            "seed": 13,
        }

    def test_outputs(self, tmp_path, panel_csv):
        config = write_config(tmp_path, self.placebo_config(panel_csv))
        out = tmp_path / "p"
        assert main(["placebo", "--config", str(config), "--out", str(out), "--quiet"]) == 0
        rows = (out / "placebo.csv").read_text().splitlines()
        assert rows[0] == "draw,unit,tau"
        assert len(rows) == 7
        summary = json.loads((out / "placebo_summary.json").read_text())
        assert summary["draws"] == 6
        assert summary["sd"] >= 0.0

    def test_identical_donor_sd_zero(self, tmp_path):
        base = np.linspace(2.0, 8.0, 9)
        rows = ["unit,time,outcome"]
        for unit in ("t", "d1", "d2", "d3", "d4"):
            series = base + 1.0 if unit == "t" else base
            for t, value in enumerate(series):
                rows.append(f"{unit},{t},{float(value)!r}")
        csv_path = tmp_path / "flat.csv"
        csv_path.write_text("\n".join(rows) + "\n")
        config = write_config(tmp_path, {
            "data": {"path": str(csv_path),
                     "schema": {"treated_unit": "t", "t0": 6, "tv": 3}},
            "predictors": {"lags": [{"offsets": {"0": 1.0}}]},
            "estimator": "scm_fixed",
            "draws": 8,
            "seed": 3,
        })
        out = tmp_path / "p0"
        assert main(["placebo", "--config", str(config), "--out", str(out), "--quiet"]) == 0
        summary = json.loads((out / "placebo_summary.json").read_text())
        assert summary["sd"] == pytest.approx(0.0, abs=1e-12)

    def test_too_few_donors_exit_2(self, tmp_path):
        rows = ["unit,time,outcome"]
        for unit in ("t", "d1", "d2"):
            for t in range(6):
                rows.append(f"{unit},{t},{float(t + 1)!r}")
        csv_path = tmp_path / "two.csv"
        csv_path.write_text("\n".join(rows) + "\n")
        config = write_config(tmp_path, {
            "data": {"path": str(csv_path),
                     "schema": {"treated_unit": "t", "t0": 4, "tv": 2}},
            "predictors": {"lags": [{"offsets": {"0": 1.0}}]},
            "estimator": "scm_fixed",
            "draws": 4,
            "seed": 3,
        })
        assert main(["placebo", "--config", str(config), "--out", str(tmp_path / "x")]) == 2


class TestHelp:
    @pytest.mark.parametrize("command", ["estimate", "simulate", "placebo"])
    def test_help_documents_config_keys(self, command, capsys):
        with pytest.raises(SystemExit) as err:
            main([command, "--help"])
        assert err.value.code == 0
        text = capsys.readouterr().out
        for key in ("solver", "seed", "lambda_grid", "anchor"):
            assert key in text
