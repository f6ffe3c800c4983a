import csv
import json

import pytest

from cbsprob import cli
from cbsprob.config import ConfigError, load_config, parse_config

HEADER = "# cbsprob-config v1\n"
TASK = """
[task video]
period = 100000
server_period = 50000
budget = 22500
beta = 2, 7, 99500
"""


def write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParse:
    def test_defaults(self):
        cfg = parse_config(HEADER + TASK, mode="analyze")
        task = cfg.tasks[0]
        assert task.deadline == task.period == 100_000
        assert cfg.solvers == ["analytic"]
        assert task.delta == {"analytic": "Q/2"}
        assert task.pmf_source["kind"] == "beta"

    def test_server_period_must_divide(self):
        text = HEADER + TASK.replace("50000", "30000")
        with pytest.raises(ConfigError, match="server_period must divide period") as err:
            parse_config(text, mode="analyze")
        assert ":5:" in str(err.value)

    def test_delta_must_divide_budget(self):
        text = HEADER + TASK + "delta = 7\n"
        with pytest.raises(ConfigError, match="does not divide budget"):
            parse_config(text, mode="analyze")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'budgett'"):
            parse_config(HEADER + TASK + "budgett = 3\n", mode="analyze")

    def test_missing_key(self):
        with pytest.raises(ConfigError, match="missing required key 'period'"):
            parse_config(HEADER + TASK.replace("period = 100000\n", ""), mode="analyze")

    def test_missing_budget(self):
        with pytest.raises(ConfigError, match="'budget'"):
            parse_config(HEADER + TASK.replace("budget = 22500\n", ""), mode="analyze")

    def test_header_required(self):
        with pytest.raises(ConfigError, match="header"):
            parse_config(TASK, mode="analyze")

    def test_mode_mismatch(self):
        with pytest.raises(ConfigError, match="mode"):
            parse_config(HEADER + "[global]\nmode = simulate\n" + TASK, mode="analyze")

    def test_unknown_solver(self):
        with pytest.raises(ConfigError, match="unknown solver"):
            parse_config(HEADER + "[global]\nsolver = newton\n" + TASK, mode="analyze")

    def test_pmf_source_exclusive(self):
        with pytest.raises(ConfigError, match="exactly one"):
            parse_config(HEADER + TASK + "pmf_file = x.pmf\n", mode="analyze")

    def test_missing_file(self):
        text = HEADER + TASK.replace("beta = 2, 7, 99500", "pmf_file = nowhere.pmf")
        with pytest.raises(ConfigError, match="file not found"):
            parse_config(text, mode="analyze")

    def test_budget_range_and_sweep(self):
        text = HEADER + TASK.replace("budget = 22500", "budget_range = 17500:22500:2500")
        text += "delta_sweep = Q/5, Q\n"
        cfg = parse_config(text, mode="analyze")
        assert cfg.tasks[0].budgets == [17_500, 20_000, 22_500]
        assert cfg.tasks[0].delta_sweep == ["Q/5", "Q"]

    def test_optimize_shape(self):
        text = HEADER + "[global]\ntotal_bandwidth = 0.95\n"
        for name, shape, slope in (("a", "2, 7", 8.9), ("b", "2, 4", 42.051)):
            text += (f"[task {name}]\nperiod = 100000\nserver_period = 50000\n"
                     f"beta = {shape}, 99500\nquality_intercept = 42\nquality_slope = {slope}\n")
        cfg = parse_config(text, mode="optimize")
        assert cfg.total_bandwidth == 0.95 and cfg.resolution == 1000
        assert [t.name for t in cfg.tasks] == ["a", "b"]
        assert cfg.tasks[1].quality_slope == 42.051

    def test_optimize_requires_bandwidth(self):
        with pytest.raises(ConfigError, match="total_bandwidth"):
            parse_config(HEADER + TASK + "quality_intercept = 40\n", mode="optimize")

    def test_comments(self):
        cfg = parse_config(HEADER + "; note\n" + TASK.replace("22500", "22500   ; 45%"),
                           mode="analyze")
        assert cfg.tasks[0].budgets == [22_500]


class TestRun:
    def test_analyze_table(self, tmp_path):
        text = (HEADER + "[global]\nsolver = analytic, cyclic-reduction\n"
                + TASK.replace("22500", "17500, 22500") + "delta_numeric = 2500\n")
        path = write(tmp_path, text)
        out, table = tmp_path / "r.json", tmp_path / "r.csv"
        code = cli.main(["analyze", "--config", str(path), "--out", str(out),
                         "--csv", str(table), "-q"])
        assert code == 0
        report = json.loads(out.read_text())
        rows = report["results"]
        assert [(r["budget"], r["solver"]) for r in rows] == [
            (17_500, "analytic"), (17_500, "cyclic-reduction"),
            (22_500, "analytic"), (22_500, "cyclic-reduction")]
        assert all(0 < r["pi0"] < 1 and r["runtime_us"] >= 0 for r in rows)
        assert report["config"]["tasks"][0]["deadline"] == 100_000
        with open(table) as fh:
            assert len(list(csv.reader(fh))) == 5

    def test_solver_override(self, tmp_path, capsys):
        path = write(tmp_path, HEADER + TASK)
        assert cli.main(["analyze", "--config", str(path), "--solver", "companion",
                         "--out", "-"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["results"][0]["solver"] == "companion"
        assert report["results"][0]["delta"] == 50

    def test_simulate_byte_identical(self, tmp_path):
        text = HEADER + "[global]\nseed = 4\njobs = 20000\n" + TASK
        path = write(tmp_path, text)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert cli.main(["simulate", "--config", str(path), "--out", str(a), "-q"]) == 0
        assert cli.main(["simulate", "--config", str(path), "--out", str(b), "-q"]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert cli.main(["simulate", "--config", str(path), "--out", str(b), "-q",
                         "--seed", "5"]) == 0
        assert a.read_bytes() != b.read_bytes()

    def test_optimize_report(self, tmp_path, capsys):
        text = HEADER + "[global]\ntotal_bandwidth = 0.95\nresolution = 5000\nexact_delta = Q/10\n"
        for name, shape, slope in (("a", "2, 7", 8.9), ("b", "2, 4", 42.051)):
            text += (f"[task {name}]\nperiod = 100000\nserver_period = 50000\n"
                     f"beta = {shape}, 99500\nquality_intercept = 42\nquality_slope = {slope}\n")
        path = write(tmp_path, text)
        assert cli.main(["optimize", "--config", str(path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        columns = [c for c in lines[1].split("  ") if c]
        assert [c.strip() for c in columns] == ["Task", "Opt. Budget (us)", "Estim. Prob.",
                                                "Exact Prob.", "Quality"]
        assert lines[3].startswith("a ") and lines[4].startswith("b ")

    def test_infeasible_exit_code(self, tmp_path):
        text = (HEADER + "[global]\ntotal_bandwidth = 0.2\n"
                + TASK + "quality_intercept = 42\nquality_slope = 10\nquality_floor = 41\n")
        assert cli.main(["optimize", "--config", str(write(tmp_path, text)), "-q"]) == 2

    def test_config_error_exit_code(self, tmp_path, capsys):
        path = write(tmp_path, HEADER + TASK.replace("50000", "30000"))
        assert cli.main(["analyze", "--config", str(path)]) == 3
        assert "server_period must divide period" in capsys.readouterr().err

    def test_bad_arguments_exit_code(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["analyze"])
        assert err.value.code == 3

    def test_numerical_failure_exit_code(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise cli.SolverError("no convergence")

        monkeypatch.setattr(cli, "solve", boom)
        path = write(tmp_path, HEADER + TASK)
        assert cli.main(["analyze", "--config", str(path), "-q"]) == 4

    def test_threads_keep_order(self, tmp_path, monkeypatch):
        text = HEADER + TASK.replace("budget = 22500", "budget_range = 15000:30000:2500")
        path = write(tmp_path, text)
        rows = {}
        for threads in ("1", "3"):
            monkeypatch.setenv(cli.THREADS_ENV, threads)
            cfg = load_config(path, mode="analyze")
            rows[threads] = [(r["budget"], r["pi0"]) for r in cli.run(cfg).record["results"]]
        assert rows["1"] == rows["3"]
        assert [b for b, _ in rows["1"]] == list(range(15_000, 30_001, 2_500))

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "many")
        with pytest.raises(ConfigError):
            cli.thread_count()
