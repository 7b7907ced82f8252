import json
import logging
import os

import pytest

from trire_utils.continual_system.continual_processor import (
    EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_RUNTIME, build_parser, main,
)
from trire_utils.continual_system.utils.cache_manager import cache_manager, get_cache_stats

SMALL_EXPERIMENT = """\
# two tiny blob tasks
[data]
tasks=2 classes_per_task=2 blobs_dim=5 blobs_per_class=12
[model]
hidden=8
[trire]
epochs=5 batch_size=8 buffer=10
eta=0.01 eta_prime=0.001
[experiment]
seeds=0
"""

@pytest.fixture(autouse=True)
def _detach_cli_handlers():
    yield
    root_logger = logging.getLogger()
    for handler in [h for h in root_logger.handlers if getattr(h, "_continual_cli", False)]:
        root_logger.removeHandler(handler)
        handler.close()

@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "experiment.cfg"
    path.write_text(SMALL_EXPERIMENT)
    return str(path)

def run_cli(*args):
    return main([str(a) for a in args])

class TestRun:
    def test_run_writes_outputs_and_logs(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert run_cli("run", "--config", config_file, "--out", out) == EXIT_OK
        assert (out / "manifest.json").is_file()
        assert (out / "aggregate.json").is_file()
        assert (out / "seed_0" / "metrics.json").is_file()
        assert (out / "debug.txt").is_file()
        assert "trire_utils.continual_system.analysis" in (out / "training.log").read_text()
        assert "manifest" in capsys.readouterr().out

    def test_flags_override_set_pairs(self, config_file, tmp_path):
        out = tmp_path / "out"
        code = run_cli("run", "--config", config_file, "--out", out, "--set", "method=sgd",
                       "--method", "er", "--seed", 4, "--buffer", 6)
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["method"] == "er"
        assert manifest["seeds"] == [4]
        assert manifest["config"]["trire"]["buffer"] == 6

    def test_relative_out_uses_environment_root(self, config_file, tmp_path, monkeypatch):
        monkeypatch.setenv("TRIRE_OUTPUT_ROOT", str(tmp_path / "env"))
        assert run_cli("run", "--config", config_file, "--out", "rel", "--method", "sgd") == EXIT_OK
        assert (tmp_path / "env" / "rel" / "manifest.json").is_file()

class TestExitCodes:
    def test_set_without_equals(self, config_file, tmp_path):
        assert run_cli("run", "--config", config_file, "--out", tmp_path, "--set", "tasks") == EXIT_CONFIG

    def test_unknown_key(self, config_file, tmp_path):
        assert run_cli("run", "--config", config_file, "--out", tmp_path, "--set", "tempo=3") == EXIT_CONFIG

    def test_bad_constraint(self, config_file, tmp_path, capsys):
        assert run_cli("run", "--config", config_file, "--out", tmp_path, "--set", "eta_prime=0.5") == EXIT_CONFIG
        assert "eta" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert run_cli("run", "--config", tmp_path / "missing.cfg", "--out", tmp_path) == EXIT_CONFIG

    def test_missing_dataset_files(self, config_file, tmp_path):
        code = run_cli("run", "--config", config_file, "--out", tmp_path / "out", "--set", "dataset=idx",
                       "--set", f"train_images={tmp_path / 'none.idx'}")
        assert code == EXIT_DATA
        assert not (tmp_path / "out" / "manifest.json").exists()

    def test_unreadable_checkpoint(self, config_file, tmp_path):
        bogus = tmp_path / "bogus.ckpt"
        bogus.write_bytes(b"not a checkpoint")
        assert run_cli("evaluate", bogus, "--config", config_file, "--out", tmp_path) == EXIT_RUNTIME

    def test_bad_percentiles(self, config_file, tmp_path):
        assert run_cli("sweep-rewind", "--config", config_file, "--out", tmp_path,
                       "--percentiles", "0.5,abc") == EXIT_CONFIG

    def test_unknown_criterion(self, config_file, tmp_path):
        assert run_cli("sweep-pruning", "--config", config_file, "--out", tmp_path,
                       "--criteria", "magnitude,snip") == EXIT_CONFIG

    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

class TestCheckpointCommands:
    @pytest.fixture
    def checkpoint(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert run_cli("run", "--config", config_file, "--out", out, "--set", "save_checkpoints=yes") == EXIT_OK
        return out, out / "seed_0" / "checkpoints" / "task_1.ckpt"

    def test_evaluate_writes_report(self, config_file, checkpoint, capsys):
        out, path = checkpoint
        assert run_cli("evaluate", path, "--config", config_file, "--out", out) == EXIT_OK
        report = json.loads((out / "evaluate_task_1.json").read_text())
        assert report["method"] == "trire"
        assert "Class-IL" in capsys.readouterr().out

    def test_inspect_buffer_prints_statistics(self, config_file, checkpoint, capsys, tmp_path):
        out, path = checkpoint
        capsys.readouterr()
        saved = tmp_path / "buffer.json"
        assert run_cli("inspect-buffer", path, "--config", config_file, "--out", out, "-o", saved) == EXIT_OK
        printed = capsys.readouterr().out
        stats = json.loads(printed[printed.index("{"):])
        assert stats["size"] == 10
        assert json.loads(saved.read_text())["capacity"] == 10

class TestSweeps:
    def test_sweep_hyper(self, config_file, tmp_path):
        out = tmp_path / "out"
        code = run_cli("sweep-hyper", "--config", config_file, "--out", out, "--key", "zeta", "--values", "0.5,1")
        assert code == EXIT_OK
        assert os.path.isfile(out / "hyper_zeta" / "hyper_ema_update_rate_summary.csv")

    def test_sweep_pruning_subset(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert run_cli("sweep-pruning", "--config", config_file, "--out", out, "--criteria", "magnitude") == EXIT_OK
        assert os.path.isfile(out / "pruning" / "magnitude" / "aggregate.json")

class TestRuntime:
    def test_progress_flag_prints_run_count(self, config_file, tmp_path, capsys):
        assert run_cli("run", "--config", config_file, "--out", tmp_path / "out", "--progress") == EXIT_OK
        assert "Progress: 1/1" in capsys.readouterr().out

    def test_caches_cleared_after_command(self, config_file, tmp_path):
        cache_manager.get_cache("idx_datasets").set("stale", 1)
        assert run_cli("run", "--config", config_file, "--out", tmp_path / "out", "--method", "sgd") == EXIT_OK
        assert get_cache_stats("idx_datasets") == {"hits": 0, "misses": 0, "size": 0}
