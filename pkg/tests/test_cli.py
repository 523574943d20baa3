"""Command-line interface: config parsing, seed precedence, exit codes,
deterministic summaries, and the report/trace outputs."""
import copy
import json
import os

import pytest

from bitstab.cli import (
    EXIT_CHECK,
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    load_config,
    main,
    run_experiment,
    summary_json,
)
from bitstab.cli import ConfigFileError


def base_config(**run_overrides):
    cfg = {
        "schema_version": 1,
        "model": {"gain": 1.5},
        "noise": {"family": "bounded_uniform", "b0": 0.5},
        "initial": {"kind": "uniform", "lo": -1.0, "hi": 1.0},
        "controller": {"M": 2, "B": 1.0, "magnitude_tests": False},
        "run": {"horizon": 2000, "trajectories": 16, "seed": 7},
        "checks": ["plateau", "bounded"],
    }
    cfg["run"].update(run_overrides)
    return cfg


class TestLoadConfig:
    def test_accepts_base(self):
        load_config(base_config())

    @pytest.mark.parametrize("mutate", [
        lambda c: c.update(extra=1),
        lambda c: c["model"].update(gaim=1.5),
        lambda c: c["noise"].update(b_zero=0.5),
        lambda c: c["initial"].update(center=0.0),
        lambda c: c["controller"].update(probes=2),
        lambda c: c["run"].update(horizn=10),
    ])
    def test_unknown_keys_rejected_everywhere(self, mutate):
        cfg = base_config()
        mutate(cfg)
        with pytest.raises(ConfigFileError, match="unknown key"):
            load_config(cfg)

    def test_wrong_schema_version_rejected(self):
        cfg = base_config()
        cfg["schema_version"] = 2
        with pytest.raises(ConfigFileError, match="schema_version"):
            load_config(cfg)

    def test_unknown_check_rejected(self):
        cfg = base_config()
        cfg["checks"] = ["plateau", "vibes"]
        with pytest.raises(ConfigFileError, match="vibes"):
            load_config(cfg)


class TestRunExperiment:
    def test_passing_run(self):
        code, summary = run_experiment(base_config())
        assert code == EXIT_OK
        assert summary["passed"] is True
        assert set(summary["checks"]) == {"plateau", "bounded"}
        assert all(c["passed"] for c in summary["checks"].values())

    def test_check_failure_exit_code(self):
        cfg = base_config()
        # one-bin coder cannot stabilize a = 1.5: plateau must fail
        cfg["controller"] = {"M": 1, "B": 1.0, "magnitude_tests": False}
        cfg["checks"] = ["plateau"]
        code, summary = run_experiment(cfg)
        assert code == EXIT_CHECK
        assert summary["passed"] is False

    def test_invalid_config_exit_code(self):
        cfg = base_config()
        cfg["controller"]["delta"] = 0.5  # outside the admissible range
        code, summary = run_experiment(cfg)
        assert code == EXIT_CONFIG
        assert summary["violations"]

    def test_seed_priority_argument_beats_config(self):
        cfg = base_config()
        _, s_cfg = run_experiment(cfg)
        _, s_arg = run_experiment(cfg, seed=7)
        _, s_other = run_experiment(cfg, seed=8)
        assert s_cfg["seeds"]["seed"] == 7 and s_arg["seeds"]["seed"] == 7
        assert s_other["seeds"]["seed"] == 8
        m = lambda s: s["estimates"]["moment"]["mean"]
        assert m(s_cfg) == m(s_arg) != m(s_other)

    def test_seed_env_is_lowest_priority(self, monkeypatch):
        cfg = base_config()
        del cfg["run"]["seed"]
        monkeypatch.setenv("BITSTAB_SEED", "11")
        _, s_env = run_experiment(cfg)
        assert s_env["seeds"]["seed"] == 11
        cfg["run"]["seed"] = 12
        _, s_cfg = run_experiment(cfg)
        assert s_cfg["seeds"]["seed"] == 12
        monkeypatch.delenv("BITSTAB_SEED")
        del cfg["run"]["seed"]
        _, s_def = run_experiment(cfg)
        assert s_def["seeds"]["seed"] == 0

    def test_summary_deterministic_across_workers(self):
        cfg = base_config()
        _, s1 = run_experiment(copy.deepcopy(cfg), workers=1)
        _, s4 = run_experiment(copy.deepcopy(cfg), workers=4)
        s1.pop("timing"), s4.pop("timing")
        assert summary_json(s1) == summary_json(s4)

    def test_vector_config_dispatch(self):
        cfg = {
            "schema_version": 1,
            "model": {"gain": [[1.2, 0.0], [0.0, 1.3]]},
            "noise": {"family": "bounded_uniform", "b0": 0.5},
            "initial": {"kind": "uniform", "lo": -1.0, "hi": 1.0},
            "controller": {"M": 2},
            "run": {"horizon": 4000, "trajectories": 6, "seed": 3},
            "checks": ["plateau", "schedule_density"],
        }
        code, summary = run_experiment(cfg)
        assert code == EXIT_OK
        assert summary["kind"] == "vector"
        assert sum(summary["estimates"]["vector"]["densities"]) < 1.0


class TestMainExitCodes:
    def _write(self, tmp_path, cfg, name="cfg.json"):
        path = tmp_path / name
        path.write_text(json.dumps(cfg))
        return str(path)

    def test_run_ok_and_outputs(self, tmp_path, capsys):
        cfg_path = self._write(tmp_path, base_config())
        summary_path = tmp_path / "out" / "summary.json"
        report_dir = tmp_path / "report"
        rc = main(["run", "--config", cfg_path, "--workers", "1",
                   "--summary-out", str(summary_path),
                   "--report-dir", str(report_dir)])
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS" in out and "overall" in out.lower()
        summary = json.loads(summary_path.read_text())
        assert summary["passed"] is True
        produced = sorted(os.listdir(report_dir))
        assert "report.txt" in produced
        assert "moment_curve.csv" in produced
        assert "moment_curve.png" in produced
        assert "tau_tail.csv" in produced and "tau_tail.png" in produced

    def test_run_missing_file_is_io_error(self, tmp_path):
        rc = main(["run", "--config", str(tmp_path / "nope.json")])
        assert rc == EXIT_IO

    def test_run_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG

    def test_run_unknown_key(self, tmp_path, capsys):
        cfg = base_config()
        cfg["model"]["gaim"] = 1.5
        rc = main(["run", "--config", self._write(tmp_path, cfg)])
        assert rc == EXIT_CONFIG
        assert "unknown key" in capsys.readouterr().err

    def test_traces_out_csv(self, tmp_path):
        cfg = base_config(trace_count=2, horizon=500, trajectories=4)
        rc = main(["run", "--config", self._write(tmp_path, cfg),
                   "--workers", "1",
                   "--traces-out", str(tmp_path / "traces")])
        assert rc == EXIT_OK
        files = sorted(os.listdir(tmp_path / "traces"))
        assert len(files) == 2
        header = (tmp_path / "traces" / files[0]).read_text().splitlines()[0]
        assert header.split(",")[:3] == ["n", "x", "scheduled"]

    def test_validate_ok(self, tmp_path, capsys):
        rc = main(["validate", "--config",
                   self._write(tmp_path, base_config())])
        assert rc == EXIT_OK
        assert "ok" in capsys.readouterr().out

    def test_validate_fatal_violation(self, tmp_path, capsys):
        cfg = base_config()
        cfg["controller"]["delta"] = 0.5
        rc = main(["validate", "--config", self._write(tmp_path, cfg)])
        assert rc == EXIT_CONFIG

    def test_report_from_summary(self, tmp_path):
        cfg_path = self._write(tmp_path, base_config())
        summary_path = tmp_path / "summary.json"
        main(["run", "--config", cfg_path, "--workers", "1",
              "--summary-out", str(summary_path)])
        rc = main(["report", "--summary", str(summary_path),
                   "--report-dir", str(tmp_path / "rep")])
        assert rc == EXIT_OK
        assert "report.txt" in os.listdir(tmp_path / "rep")
