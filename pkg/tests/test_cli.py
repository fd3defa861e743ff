import csv
import json

import numpy as np
import pytest

from riskalloc.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC, EXIT_OK, main
from riskalloc.config import ConfigError, parse_config
from riskalloc.report import ecdf_grid, fd_histogram, load_results, validate_results


def base_config(**run):
    r = {"n_steps": 2000, "c": 2.0, "gamma": 0.7, "averaging_t": 10.0, "seed": 4}
    r.update(run)
    return {
        "loss": {"kind": "exponential", "d": 2, "alpha": 1.0, "beta": 1.0},
        "sampler": {"kind": "gaussian", "cov": [[1.0, 0.0], [0.0, 1.0]]},
        "run": r,
    }


def cp_config(target, intensities=(1.0, 3.0)):
    return {
        "loss": {"kind": "pospart_quadratic", "d": len(intensities), "alpha": 0.0},
        "sampler": {"kind": "compound_poisson", "intensities": list(intensities), "horizon": 1.0,
                    "jumps": {"kind": "exponential", "rate": 1.0}, "target_corr": target},
        "run": {"n_steps": 1000, "c": 1.0, "gamma": 0.7, "averaging_t": 10.0, "seed": 2,
                "rect": {"m_bounds": [0.0, 10.0], "lambda_max": 5.0}},
        "calibration": {"check_draws": 20000},
    }


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestConfig:
    @pytest.mark.parametrize("mutate,path", [
        (lambda c: c.pop("loss"), "loss"),
        (lambda c: c["loss"].update(kind="cubic"), "loss.kind"),
        (lambda c: c["loss"].update(d=1), "loss.d"),
        (lambda c: c["sampler"].update(cov=[[1.0]]), "sampler.cov"),
        (lambda c: c["run"].update(n_steps=0), "run.n_steps"),
        (lambda c: c["run"].update(gamma=0.4), "run.gamma"),
        (lambda c: c["run"].pop("seed"), "run.seed"),
        (lambda c: c["run"].update(z0=[5.0, 0.0, 1.0]), "run.z0"),
        (lambda c: c["run"].update(gamma=1.0), "run.averaging_t"),
        (lambda c: c.update(replicate={"N": 0}), "replicate.N"),
        (lambda c: c.update(oracle={"kind": "fourier"}), "oracle.kind"),
    ])
    def test_error_paths(self, mutate, path):
        cfg = base_config()
        mutate(cfg)
        with pytest.raises(ConfigError) as info:
            parse_config(cfg)
        assert info.value.path == path

    def test_seed_override(self):
        cfg = base_config()
        cfg["run"].pop("seed")
        assert parse_config(cfg, seed_override=11).run.seed == 11

    def test_defaults_materialized(self):
        m = parse_config(base_config()).materialized()
        assert m["run"]["alpha_level"] == 0.05
        assert m["run"]["rect"]["upper"] == [2.0, 2.0, 2.0]
        assert m["run"]["jac_epsilon"] == pytest.approx(2e-3)
        assert m["loss"]["beta"] == 1.0


class TestRun:
    def test_artifacts_and_round_trip(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", write(tmp_path, base_config()), "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "trajectory.csv")
        assert rows[0] == ["step", "m_1", "m_2", "lambda", "clamped"]
        text = (out / "results.json").read_text()
        data = load_results(out / "results.json")
        assert json.loads(json.dumps(data)) == json.loads(text)
        assert data["pr_average"] == [float(v) for v in data["pr_average"]]
        ci = data["confidence_intervals"]
        assert ci["alpha_level"] == 0.05 and len(ci["printed"]) == 3 and len(ci["step"]) == 3
        assert "uncentered" in data["estimator_notes"]
        assert data["gain_diagnostic"] is not None
        assert set(data["condition_numbers"]) == {"a_n", "sigma_n"}
        assert read_csv(out / "vn_history.csv")[0][0] == "step"

    def test_minimal_run(self, tmp_path):
        cfg = base_config(n_steps=1, gamma=1.0, averaging_t=None, z0=[1.0, 1.0, 1.0])
        out = tmp_path / "o"
        assert main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "trajectory.csv")
        assert len(rows) == 3 and rows[1][:4] == ["0", "1.0", "1.0", "1.0"]
        data = load_results(out / "results.json")
        assert data["pr_average"] is None

    def test_seed_flag(self, tmp_path):
        path = write(tmp_path, base_config())
        main(["run", "--config", path, "--out", str(tmp_path / "a")])
        main(["run", "--config", path, "--out", str(tmp_path / "b"), "--seed", "99"])
        a = load_results(tmp_path / "a" / "results.json")
        b = load_results(tmp_path / "b" / "results.json")
        assert a["final"] != b["final"] and b["config"]["run"]["seed"] == 99

    def test_config_error_exit(self, tmp_path, capsys):
        cfg = base_config(n_steps=-3)
        assert main(["run", "--config", write(tmp_path, cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "run.n_steps" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    def test_numerical_failure_exit(self, tmp_path, capsys):
        cfg = base_config()
        cfg["sampler"]["mean"] = [800.0, 800.0]
        assert main(["run", "--config", write(tmp_path, cfg), "--out", str(tmp_path)]) == EXIT_NUMERIC
        assert "step 1" in capsys.readouterr().err


class TestReplicate:
    def test_two_rows_reproducible(self, tmp_path):
        cfg = base_config(n_steps=500)
        cfg["replicate"] = {"N": 2, "mode": "PR"}
        path = write(tmp_path, cfg)
        for name in ("a", "b"):
            assert main(["replicate", "--config", path, "--out", str(tmp_path / name)]) == EXIT_OK
        a = read_csv(tmp_path / "a" / "replications.csv")
        assert a[0] == ["rep", "m_1", "m_2", "lambda", "D_1", "D_2", "D_3"]
        assert len(a) == 3
        assert a == read_csv(tmp_path / "b" / "replications.csv")
        summary = json.loads((tmp_path / "a" / "summary.json").read_text())
        assert set(summary["coverage"]) >= {"printed", "step"}
        assert summary["oracle"]["z_star"] == [0.5, 0.5, 1.0]
        assert read_csv(tmp_path / "a" / "ecdf.csv")[0] == ["coord", "x", "F"]
        assert read_csv(tmp_path / "a" / "epdf.csv")[0] == ["coord", "bin_left", "bin_right", "density"]

    def test_oracle_unavailable(self, tmp_path, capsys):
        cfg = base_config(n_steps=200)
        cfg["loss"] = {"kind": "pospart_quadratic", "d": 2, "alpha": 1.0}
        cfg["replicate"] = {"N": 2}
        assert main(["replicate", "--config", write(tmp_path, cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "saa" in capsys.readouterr().err

    def test_given_oracle(self, tmp_path):
        cfg = base_config(n_steps=300)
        cfg["replicate"] = {"N": 3, "mode": "RM"}
        cfg["oracle"] = {"kind": "given", "z_star": [0.5, 0.5, 1.0]}
        assert main(["replicate", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "g"),
                     "--workers", "2"]) == EXIT_OK


class TestCalibrateAndOracle:
    def test_identity(self, tmp_path):
        cfg = cp_config([[1.0, 0.0], [0.0, 1.0]])
        out = tmp_path / "cal"
        assert main(["calibrate", "--config", write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
        rep = json.loads((out / "calibration.json").read_text())
        assert rep["gauss_corr"] == [[1.0, 0.0], [0.0, 1.0]]

    def test_report_within_tol(self, tmp_path):
        rng = np.random.default_rng(3)
        d = 10
        w = rng.uniform(-0.5, 0.5, size=(d, 2))
        t = w @ w.T + np.eye(d)
        s = np.sqrt(np.diag(t))
        t = t / np.outer(s, s)
        np.fill_diagonal(t, 1.0)
        cfg = cp_config(t.tolist(), intensities=rng.uniform(1, 3, d).tolist())
        out = tmp_path / "cal10"
        assert main(["calibrate", "--config", write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
        rep = json.loads((out / "calibration.json").read_text())
        assert len(rep["pairs"]) == 45
        assert rep["max_model_abs_err"] <= rep["tol"]
        assert rep["max_simulated_abs_err"] <= 0.03

    def test_infeasible(self, tmp_path, capsys):
        cfg = cp_config([[1.0, 0.9999], [0.9999, 1.0]])
        assert main(["calibrate", "--config", write(tmp_path, cfg), "--out", str(tmp_path)]) == EXIT_INFEASIBLE
        assert "(1, 0)" in capsys.readouterr().err

    def test_calibrate_needs_compound_poisson(self, tmp_path):
        assert main(["calibrate", "--config", write(tmp_path, base_config()), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_run_emits_gauss_corr(self, tmp_path):
        cfg = cp_config([[1.0, 0.3], [0.3, 1.0]])
        out = tmp_path / "cp"
        assert main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) in (EXIT_OK,)
        data = load_results(out / "results.json")
        assert data["calibration"]["gauss_corr"][0][1] > 0.3

    def test_oracle_closed_form(self, tmp_path, capsys):
        cfg = base_config()
        cfg["sampler"]["cov"] = [[1.0, 0.5], [0.5, 1.0]]
        assert main(["oracle", "--config", write(tmp_path, cfg)]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["z_star"][0] == pytest.approx(0.6364, abs=1e-4)


class TestReportHelpers:
    def test_validate_rejects_shape(self):
        bad = {"config": {}, "final": [0, 0, 0], "pr_average": None, "sigma_n": [[1, 0], [0, 1]],
               "a_n": None, "v_n": None, "condition_numbers": {}, "confidence_intervals": None,
               "gain_diagnostic": None, "boundary_contacts": [0, 0, 0], "wall_time_s": 1.0}
        with pytest.raises(ValueError):
            validate_results(bad)

    def test_ecdf_and_histogram(self):
        x = np.random.default_rng(0).normal(size=1000)
        g = ecdf_grid(x)
        assert g["x"][0] == x.min() and g["x"][-1] == x.max() and np.all(np.diff(g["x"]) >= 0)
        h = fd_histogram(x)
        widths = np.diff(h["edges"])
        assert np.sum(np.array(h["density"]) * widths) == pytest.approx(1.0)
        iqr = np.subtract(*np.percentile(x, [75, 25]))
        assert widths[0] == pytest.approx(2 * iqr / 1000 ** (1 / 3), rel=0.1)
