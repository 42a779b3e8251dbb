"""Command surface: parsing, precedence, exit codes, output files."""

import json
import re

import pytest

from newsvb.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def parse_report(out):
    values = {}
    for line in out.strip().split("\n"):
        parts = line.split()
        if len(parts) >= 2:
            values[" ".join(parts[:-1])] = parts[-1]
    return values


class TestFit:
    def test_synthetic_fit_recovers_rate(self, capsys):
        code, out, _ = run_cli(
            capsys, "fit", "--n", "5000", "--theta0", "0.68", "--seed", "11"
        )
        assert code == 0
        mean = float(parse_report(out)["mean rate E_q[th]"])
        assert abs(mean - 0.68) < 0.05

    def test_calibrated_fit_with_constant_risk_matches_plain(self, capsys):
        base = ["--n", "400", "--theta0", "0.68", "--seed", "11"]
        code, plain_out, _ = run_cli(capsys, "fit", *base)
        assert code == 0
        code, cal_out, _ = run_cli(
            capsys, "fit", *base, "--calibrate", "2.0", "--constant-risk", "3.0"
        )
        assert code == 0
        plain, cal = parse_report(plain_out), parse_report(cal_out)
        assert abs(float(plain["mu"]) - float(cal["mu"])) < 1e-6
        assert abs(float(plain["sigma"]) - float(cal["sigma"])) < 1e-6

    def test_requires_some_data_source(self, capsys):
        code, _, err = run_cli(capsys, "fit", "--theta0", "0.68")
        assert code == 2
        assert "provide demand data" in err

    def test_malformed_json_config(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        code, _, err = run_cli(capsys, "fit", "--config", str(bad), "--n", "10")
        assert code == 2
        assert "malformed JSON" in err

    def test_unknown_config_key_named_in_error(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"theta0": 0.68, "n": 50, "thata0": 1}), encoding="utf-8")
        code, _, err = run_cli(capsys, "fit", "--config", str(cfg))
        assert code == 2
        assert "thata0" in err


class TestDecide:
    def test_bayes_and_nvb_agree_at_moderate_n(self, capsys):
        base = ["--n", "2000", "--theta0", "0.68", "--seed", "5"]
        code, out_bayes, _ = run_cli(capsys, "decide", "--rule", "bayes", *base)
        assert code == 0
        code, out_nvb, _ = run_cli(capsys, "decide", "--rule", "nvb", *base)
        assert code == 0
        a_bayes = float(parse_report(out_bayes)["action"])
        a_nvb = float(parse_report(out_nvb)["action"])
        assert abs(a_bayes - a_nvb) < 0.1

    def test_lcvb_action_inside_interval(self, capsys):
        code, out, _ = run_cli(
            capsys, "decide", "--rule", "lcvb", "--n", "200", "--theta0", "0.68", "--seed", "5"
        )
        assert code == 0
        action = float(parse_report(out)["action"])
        assert 0.0 <= action <= 50.0

    def test_unknown_rule_exits_2(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["decide", "--rule", "magic", "--n", "10", "--theta0", "0.68"])
        assert excinfo.value.code == 2

    def test_gap_metrics_only_with_known_rate(self, capsys):
        code, out, _ = run_cli(capsys, "decide", "--rule", "nvb", "--values", "1.0,2.0,0.5,1.5")
        assert code == 0
        assert "gap_action" not in out
        code, out, _ = run_cli(
            capsys, "decide", "--rule", "nvb", "--values", "1.0,2.0,0.5,1.5",
            "--theta0", "0.68",
        )
        assert code == 0
        assert "gap_action" in out


class TestSeedPrecedence:
    def test_flag_beats_env_beats_file(self, capsys, tmp_path, monkeypatch):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"theta0": 0.68, "n": 100, "seed": 1}), encoding="utf-8")

        def fitted_mu(*argv):
            code, out, _ = run_cli(capsys, "fit", *argv)
            assert code == 0
            return parse_report(out)["mu"]

        direct = {seed: fitted_mu("--n", "100", "--theta0", "0.68", "--seed", str(seed))
                  for seed in (1, 2, 3)}
        assert len(set(direct.values())) == 3

        monkeypatch.delenv("SEED", raising=False)
        assert fitted_mu("--config", str(cfg)) == direct[1]
        monkeypatch.setenv("SEED", "2")
        assert fitted_mu("--config", str(cfg)) == direct[2]
        assert fitted_mu("--config", str(cfg), "--seed", "3") == direct[3]


class TestExperimentCommand:
    def test_tiny_run_row_arithmetic_and_determinism(self, capsys, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(
            json.dumps(
                {
                    "theta0": 0.68,
                    "b": 0.1,
                    "alpha": 1.0,
                    "beta": 4.1,
                    "h_values": [0.004, 0.008],
                    "n_schedule": [10, 30],
                    "replications": 3,
                    "quantile_level": 0.5,
                    "master_seed": 99,
                    "rules": ["NVB", "LCVB"],
                }
            ),
            encoding="utf-8",
        )
        out1 = tmp_path / "run1"
        out2 = tmp_path / "run2"
        code, _, _ = run_cli(
            capsys, "experiment", "--config", str(cfg), "--out", str(out1), "--jobs", "1"
        )
        assert code == 0
        code, _, _ = run_cli(
            capsys, "experiment", "--config", str(cfg), "--out", str(out2), "--jobs", "2"
        )
        assert code == 0
        first = (tmp_path / "run1.csv").read_bytes()
        second = (tmp_path / "run2.csv").read_bytes()
        assert first == second
        lines = first.decode().strip().split("\n")
        assert len(lines) == 1 + 2 * 2 * 2  # header + rules x h x n

    def test_quantile_flag_changes_level_column_only(self, capsys, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(
            json.dumps(
                {
                    "theta0": 0.68,
                    "b": 0.1,
                    "alpha": 1.0,
                    "beta": 4.1,
                    "h_values": [0.005],
                    "n_schedule": [10],
                    "replications": 3,
                    "quantile_level": 0.5,
                    "master_seed": 99,
                    "rules": ["NVB"],
                }
            ),
            encoding="utf-8",
        )
        code, _, _ = run_cli(
            capsys, "experiment", "--config", str(cfg), "--out", str(tmp_path / "q50")
        )
        assert code == 0
        code, _, _ = run_cli(
            capsys,
            "experiment", "--config", str(cfg), "--out", str(tmp_path / "q90"),
            "--quantile", "0.9",
        )
        assert code == 0
        rows50 = (tmp_path / "q50.csv").read_text().strip().split("\n")[1:]
        rows90 = (tmp_path / "q90.csv").read_text().strip().split("\n")[1:]
        for r50, r90 in zip(rows50, rows90):
            f50, f90 = r50.split(","), r90.split(",")
            assert f50[3] == "0.5" and f90[3] == "0.9"
            # same rule/h/n and identical replication bookkeeping
            assert f50[:3] == f90[:3] and f50[6:] == f90[6:]

    def test_paper_defaults_reduced_scale(self, capsys, tmp_path):
        code, out, _ = run_cli(
            capsys,
            "experiment", "--paper-defaults", "--replications", "2",
            "--out", str(tmp_path / "ref"), "--jobs", "2", "--seed", "123",
        )
        assert code == 0
        lines = (tmp_path / "ref.csv").read_text().strip().split("\n")
        assert len(lines) == 1 + 9 * 4 * 2  # h values x n schedule x rules
        manifest = json.loads((tmp_path / "ref.manifest.json").read_text())
        assert manifest["seed"] == 123
        assert manifest["config"]["theta0"] == 0.68

    def test_requires_some_configuration(self, capsys):
        code, _, err = run_cli(capsys, "experiment")
        assert code == 2
        assert "--paper-defaults" in err


class TestCheck:
    def test_default_run_passes(self, capsys):
        code, out, _ = run_cli(capsys, "check")
        assert code == 0
        assert re.search(r"kl-decomposition\s+residual=", out)
        assert out.count("PASS") == 4
        assert "FAIL" not in out

    def test_injected_fault_fails(self, capsys):
        code, out, _ = run_cli(capsys, "check", "--inject-fault")
        assert code == 1
        assert "FAIL" in out


class TestExitCodes:
    def test_numerical_failure_maps_to_exit_3(self, capsys, monkeypatch):
        import newsvb.cli as cli
        from newsvb.numerics import NumericalError

        def explode(*args, **kwargs):
            raise NumericalError("synthetic failure")

        monkeypatch.setattr(cli, "build_posterior", explode)
        code, _, err = run_cli(capsys, "fit", "--n", "10", "--theta0", "0.68")
        assert code == 3
        assert "numerical failure" in err

    def test_no_command_prints_usage(self, capsys):
        code, _, err = run_cli(capsys)
        assert code == 2
        assert "usage" in err

    def test_env_seed_reaches_experiment_master_seed(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("SEED", "31337")
        code, _, _ = run_cli(
            capsys,
            "experiment", "--paper-defaults", "--replications", "1",
            "--out", str(tmp_path / "env"),
        )
        assert code == 0
        manifest = json.loads((tmp_path / "env.manifest.json").read_text())
        assert manifest["seed"] == 31337
