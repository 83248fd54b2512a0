import json
import subprocess
import sys

import pytest

from arena.cli import main
from arena.harness import aggregate, read_jsonl


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "planted.json"
    path.write_text(json.dumps({
        "name": "small",
        "task": {"family": "planted_rank", "m": 8, "n": 8, "K": 6},
        "adapter": {"r_init": 4},
        "prox": {"total_epochs": 15},
        "seeds": [0, 1],
    }))
    return path


def run(*argv):
    return main([str(a) for a in argv])


class TestRun:
    def test_outputs(self, cfg_path, tmp_path):
        out = tmp_path / "out"
        assert run("run", "--config", cfg_path, "--out", out, "-q") == 0
        results, bad = read_jsonl(out / "results.jsonl")
        assert bad == 0 and [r.seed for r in results] == [0, 1]
        lines = (out / "summary.csv").read_text().splitlines()
        meta = json.loads(lines[0][2:])
        assert meta["version"] == results[0].version
        assert meta["config"]["name"] == "small"
        assert len(lines) == 2 + 2

    def test_missing_config(self, tmp_path, caplog):
        assert run("run", "--config", tmp_path / "nope.json", "--out", tmp_path) == 2
        assert "nope.json" in caplog.text

    def test_bad_json(self, tmp_path, caplog):
        path = tmp_path / "bad.json"
        path.write_text('{"strategy": "arena",}')
        assert run("run", "--config", path, "--out", tmp_path) == 2
        assert "line 1" in caplog.text

    def test_unknown_override(self, cfg_path, tmp_path, caplog):
        assert run("run", "--config", cfg_path, "--out", tmp_path, "--set", "prox.lamda=1") == 2
        assert "prox.lamda" in caplog.text

    def test_override_in_metadata(self, cfg_path, tmp_path):
        out = tmp_path / "o"
        assert run("run", "--config", cfg_path, "--out", out, "--set", "prox.lambda=0.0", "-q") == 0
        results, _ = read_jsonl(out / "results.jsonl")
        assert all(r.config["prox"]["lambda"] == 0.0 for r in results)

    def test_byte_identical(self, cfg_path, tmp_path):
        for name in ("a", "b"):
            assert run("run", "--config", cfg_path, "--out", tmp_path / name, "--seeds", "3", "-q") == 0
        assert (tmp_path / "a/results.jsonl").read_bytes() == (tmp_path / "b/results.jsonl").read_bytes()

    def test_config_file_untouched(self, cfg_path, tmp_path):
        before = cfg_path.read_bytes()
        run("run", "--config", cfg_path, "--out", tmp_path / "x", "--set", "prox.rho=0.1", "-q")
        assert cfg_path.read_bytes() == before

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_nan_abort_exit(self, cfg_path, tmp_path):
        code = run("run", "--config", cfg_path, "--out", tmp_path / "n", "-q",
                   "--set", "prox.base_lr=1e6", "--set", "task.noise_sigma=1e200")
        assert code == 3

    def test_env_default_out(self, cfg_path, tmp_path, monkeypatch):
        monkeypatch.setenv("ARENA_OUT", str(tmp_path / "root"))
        assert run("run", "--config", cfg_path, "--seeds", "0", "-q") == 0
        assert (tmp_path / "root/small/results.jsonl").exists()

    def test_bad_seeds(self, cfg_path, tmp_path):
        assert run("run", "--config", cfg_path, "--out", tmp_path, "--seeds", "a,b") == 2

    def test_usage_error(self):
        assert run("run") == 2


class TestSweep:
    def test_rank_init(self, cfg_path, tmp_path):
        out = tmp_path / "s"
        assert run("sweep", "--config", cfg_path, "--out", out, "--axis", "rank_init",
                   "--values", "2,4,8", "-q") == 0
        results, _ = read_jsonl(out / "results.jsonl")
        assert len(results) == 3 * 2 * 2
        plot = [line for line in (out / "plot_rank_init.csv").read_text().splitlines() if not line.startswith("#")]
        assert plot[0].startswith("strategy,rank_init")
        assert len(plot) == 1 + 3 * 2

    def test_lambda_adds_control(self, cfg_path, tmp_path):
        out = tmp_path / "l"
        assert run("sweep", "--config", cfg_path, "--out", out, "--axis", "lambda",
                   "--values", "0.5,1.0", "--seeds", "0", "-q") == 0
        results, _ = read_jsonl(out / "results.jsonl")
        assert sorted(r.config["prox"]["lambda"] for r in results) == [0.0, 0.5, 1.0]

    def test_k(self, cfg_path, tmp_path):
        out = tmp_path / "k"
        assert run("sweep", "--config", cfg_path, "--out", out, "--axis", "K",
                   "--values", "5,10", "--seeds", "0", "-q") == 0
        results, _ = read_jsonl(out / "results.jsonl")
        assert [r.K for r in results] == [5, 10]

    def test_empty_values(self, cfg_path, tmp_path):
        assert run("sweep", "--config", cfg_path, "--out", tmp_path, "--axis", "K", "--values", ",") == 2


class TestReport:
    @pytest.fixture
    def results_dir(self, cfg_path, tmp_path):
        out = tmp_path / "r"
        run("sweep", "--config", cfg_path, "--out", out, "--axis", "rank_init", "--values", "2,4", "-q")
        return out

    def test_one_result_one_row(self, cfg_path, tmp_path):
        out = tmp_path / "one"
        run("run", "--config", cfg_path, "--out", out, "--seeds", "0", "-q")
        assert run("report", out, "-q") == 0
        rows = [line for line in (out / "report.md").read_text().splitlines() if line.startswith("| arena")]
        assert len(rows) == 1

    def test_matches_aggregate(self, results_dir):
        assert run("report", results_dir, "-q") == 0
        results, _ = read_jsonl(results_dir / "results.jsonl")
        rows = [dict(r.csv_row(), **{"lambda": r.config["prox"]["lambda"]}) for r in results]
        oracle = aggregate(rows, keys=("task", "strategy", "K", "r_init", "lambda"))
        text = (results_dir / "report.md").read_text()
        for (_, strategy, k, r_init, lam), stats in oracle.cells.items():
            cell = f"{stats['mean']:.4f} ± {stats['std']:.4f}"
            assert any(line.startswith(f"| {strategy} | {k} | {r_init} | {lam} |") and cell in line
                       for line in text.splitlines())

    def test_best_bolded(self, results_dir):
        run("report", results_dir, "-q")
        text = (results_dir / "report.md").read_text()
        assert text.count("**") == 2

    def test_corrupted_line(self, results_dir, caplog):
        with open(results_dir / "results.jsonl", "a") as fh:
            fh.write("{not json\n")
        assert run("report", results_dir) == 0
        assert "skipped 1 corrupted" in caplog.text

    def test_no_results(self, tmp_path):
        assert run("report", tmp_path / "empty") == 2


def test_console_entry_point(cfg_path, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "arena.cli", "run", "--config", str(cfg_path),
                           "--out", str(tmp_path / "p"), "--seeds", "0", "-q"], capture_output=True)
    assert proc.returncode == 0, proc.stderr


def test_pretrain(tmp_path):
    path = tmp_path / "seg.json"
    path.write_text(json.dumps({"name": "seg", "task": {"family": "segmentation"},
                                "model": {"pretrain_examples": 16, "pretrain_epochs": 1}}))
    assert run("pretrain", "--config", path, "--out", tmp_path / "m", "-q") == 0
    assert (tmp_path / "m/pretrained.npz").exists()
    assert json.loads((tmp_path / "m/pretrained.json").read_text())["config"]["name"] == "seg"
