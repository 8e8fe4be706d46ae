import json
import os
import sys

import pandas as pd
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

import main as cli
from macfield import fpe
from macfield.model import ScenarioError, SolverError


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({
        "name": "small",
        "N": 8,
        "mode": "raw",
        "classes": [{"q": [0.2, 0.1], "K": 1, "sigma": 1.0}],
    }))
    return str(path)


class TestLoadScenario:
    def test_valid_document(self, scenario_file):
        s = cli.load_scenario(scenario_file)
        assert s.N == 8
        assert s.name == "small"

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"N": 4, "classes": [{"q": [1.0], "K": 0, "sigma": 1.0}], "foo": 1}))
        with pytest.raises(ScenarioError) as err:
            cli.load_scenario(str(path))
        assert err.value.field == "foo"

    def test_parse_error_reports_position(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"N": 4,\n  "classes": [}\n')
        with pytest.raises(ScenarioError) as err:
            cli.load_scenario(str(path))
        assert err.value.field.endswith(":2:15")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError):
            cli.load_scenario(str(tmp_path / "absent.json"))


class TestCommands:
    def test_throughput(self, tmp_path, capsys):
        assert cli.main(["throughput", "--L", "100", "--Lc", "2", "--out", str(tmp_path)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert 0 < printed["qstar"] < 1
        assert (tmp_path / "throughput.json").exists()

    def test_fpe_example(self, tmp_path):
        assert cli.main(["fpe", "--example", "example1", "--out", str(tmp_path)]) == 0
        with open(tmp_path / "roots.json") as f:
            roots = json.load(f)
        assert len(roots["solutions"]) == 3
        assert roots["conditions"]["mint"] is False
        assert list(pd.read_csv(tmp_path / "residual.csv").columns) == ["gamma", "f_gamma"]

    def test_stability_example(self, tmp_path):
        assert cli.main(["stability", "--example", "example2", "--out", str(tmp_path)]) == 0
        with open(tmp_path / "equilibria.json") as f:
            (report,) = json.load(f)
        assert report["classification"] == "unstable"
        assert report["eigenvalue_unit"] == "per slots"

    def test_stability_prints_combined_report(self, tmp_path, capsys):
        assert cli.main(["stability", "--example", "example2", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        report = json.loads(out[out.index("\n{") + 1:])
        (eq,) = report["equilibria"]
        assert eq["classification"] == "unstable"
        assert set(eq["occupancy"]) == {"H", "L"}
        assert "cycle" not in report

    def test_stability_zero_rate_is_clean_failure(self, tmp_path, capsys):
        path = tmp_path / "silent.json"
        path.write_text(json.dumps({"N": 4, "mode": "raw", "classes": [{"q": [1.0, 0.0], "K": 1, "sigma": 1.0}]}))
        assert cli.main(["stability", "--scenario", str(path), "--out", str(tmp_path)]) == 1
        assert "q_k > 0" in capsys.readouterr().out

    def test_ode_and_sim(self, tmp_path, scenario_file):
        out = str(tmp_path)
        assert cli.main(["ode", "--scenario", scenario_file, "--horizon", "200", "--out", out]) == 0
        traj = pd.read_csv(tmp_path / "trajectory.csv")
        assert traj["t"].iloc[-1] == pytest.approx(200.0)
        assert cli.main(["sim", "--scenario", scenario_file, "--slots", "5000", "--window", "1000",
                         "--seed", "3", "--out", out]) == 0
        assert len(pd.read_csv(tmp_path / "sim_windows.csv")) == 5
        with open(tmp_path / "sim_summary.json") as f:
            assert json.load(f)["seed"] == 3

    def test_missing_scenario_fails(self, tmp_path):
        assert cli.main(["fpe", "--out", str(tmp_path)]) == 1

    def test_bad_example_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["repro", "example3"])
        assert err.value.code == 2

    def test_unknown_override_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            cli.main(["fpe", "--example", "example1", "--set", "colour=blue", "--out", str(tmp_path)])
        assert err.value.code == 2


class TestConfig:
    def test_overrides(self):
        args = cli.build_parser().parse_args(["sim", "--example", "example1", "--set", "total_slots=1e6",
                                              "--set", "full=true", "--set", "horizon=5e4", "--window", "500"])
        config = cli.build_config(args)
        assert config["total_slots"] == 1_000_000
        assert config["full"] is True
        assert config["horizon"] == 50_000.0
        assert config["window"] == 500

    def test_malformed_override(self):
        args = cli.build_parser().parse_args(["sim", "--example", "example1", "--set", "seed"])
        with pytest.raises(ScenarioError):
            cli.build_config(args)


class TestRepro:
    def test_stage_failure_is_tagged(self, tmp_path, monkeypatch):
        def broken(*args, **kwargs):
            raise SolverError("no roots")

        monkeypatch.setattr(fpe, "solve", broken)
        result = cli.MacFieldPipeline({"output_dir": str(tmp_path)}).repro("example1")
        assert result == {"success": False, "stage": "fpe", "error": "no roots"}

    @pytest.mark.slow
    @pytest.mark.parametrize("example_id", ["example1", "example2"])
    def test_reproduces_reference_numbers(self, tmp_path, example_id):
        assert cli.main(["repro", example_id, "--out", str(tmp_path)]) == 0
        with open(tmp_path / "summary.json") as f:
            summary = json.load(f)
        assert summary["passed"]
        assert all(summary["checks"].values())
        assert (tmp_path / "trajectory.csv").exists()
        with open(tmp_path / "equilibria.json") as f:
            assert all("occupancy" in r for r in json.load(f))
