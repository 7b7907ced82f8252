import os

import pandas as pd
import pytest

from trire_utils.continual_system.analysis.experiment import (
    build_stream, evaluate_checkpoint, inspect_buffer, preflight, run_experiment,
)
from trire_utils.continual_system.core.exceptions import CheckpointError, DataError, ShapeError, StateError
from trire_utils.continual_system.io.artifacts import SEED_FILES, read_json
from trire_utils.continual_system.utils.config_manager import apply_overrides

def with_overrides(config, **overrides):
    return apply_overrides(config, overrides, source="test")

class TestRunExperiment:
    def test_writes_manifest_seed_files_and_aggregate(self, experiment_config, tmp_path):
        root = str(tmp_path / "run")
        outcome = run_experiment(experiment_config, root=root)
        assert os.path.isfile(os.path.join(root, "manifest.json"))
        for name in SEED_FILES.values():
            assert os.path.isfile(os.path.join(root, "seed_0", name)), name
        assert outcome.aggregate_path.endswith("aggregate.json")
        assert read_json(outcome.aggregate_path)["seeds"] == [0]
        assert len(outcome.reports) == 1
        metrics = read_json(os.path.join(root, "seed_0", "metrics.json"))
        assert metrics["class_il"] == pytest.approx(outcome.reports[0].class_il)

    def test_reruns_are_byte_identical(self, experiment_config, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        run_experiment(experiment_config, root=a)
        run_experiment(experiment_config, root=b)
        for name in ("losses.csv", "accuracy.csv", "masks.csv", "buffer.csv", "metrics.json"):
            with open(os.path.join(a, "seed_0", name), "rb") as fa, open(os.path.join(b, "seed_0", name), "rb") as fb:
                assert fa.read() == fb.read(), name

    def test_seeds_in_parallel_keep_order(self, experiment_config, tmp_path):
        config = with_overrides(experiment_config, seeds=[3, 1])
        outcome = run_experiment(config, workers=2, root=str(tmp_path / "run"))
        assert [r.seed for r in outcome.reports] == [3, 1]
        assert outcome.aggregate["metrics"]["class_il"]["n"] == 2

    def test_baseline_method(self, experiment_config, tmp_path):
        config = with_overrides(experiment_config, method="er")
        outcome = run_experiment(config, root=str(tmp_path / "run"))
        assert outcome.reports[0].method == "er"
        accuracy = pd.read_csv(tmp_path / "run" / "seed_0" / "accuracy.csv")
        assert set(accuracy["protocol"]) == {"class_il", "task_il"}

class TestData:
    def test_blob_stream_per_seed(self, experiment_config):
        stream = build_stream(experiment_config, 0)
        assert len(stream) == 2 and stream.n_features == 5 and stream.n_classes == 4

    def test_missing_idx_files_fail_before_compute(self, experiment_config, tmp_path):
        config = with_overrides(experiment_config, dataset="idx", train_images=str(tmp_path / "nope.idx"))
        with pytest.raises(DataError):
            preflight(config)
        with pytest.raises(DataError):
            run_experiment(config, root=str(tmp_path / "run"))
        assert not (tmp_path / "run").exists()

class TestCheckpoints:
    @pytest.fixture
    def saved(self, experiment_config, tmp_path):
        config = with_overrides(experiment_config, save_checkpoints=True)
        outcome = run_experiment(config, root=str(tmp_path / "run"))
        path = outcome.manifest.seed_outputs(0)["checkpoint_task_1"]
        return config, outcome, path

    def test_evaluate_matches_final_report(self, saved):
        config, outcome, path = saved
        report = evaluate_checkpoint(path, config, seed=0)
        assert report.method == "trire"
        assert report.class_il == pytest.approx(outcome.reports[0].class_il)
        assert report.stability is None

    def test_evaluate_working_parameters(self, saved):
        config, _, path = saved
        report = evaluate_checkpoint(path, config, seed=0, use_working=True)
        assert 0.0 <= report.class_il <= report.task_il <= 1.0

    def test_architecture_mismatch(self, saved):
        config, _, path = saved
        with pytest.raises(ShapeError):
            evaluate_checkpoint(path, with_overrides(config, blobs_dim=7), seed=0)

    def test_inspect_buffer(self, saved):
        config, _, path = saved
        stats = inspect_buffer(path)
        assert stats["size"] == config.get("buffer")
        assert set(stats["task_histogram"]) == {0, 1}

    def test_inspect_without_buffer(self, experiment_config, tmp_path):
        config = with_overrides(experiment_config, method="sgd", save_checkpoints=True)
        outcome = run_experiment(config, root=str(tmp_path / "sgd"))
        with pytest.raises(StateError):
            inspect_buffer(outcome.manifest.seed_outputs(0)["checkpoint_task_1"])

    def test_missing_checkpoint(self, experiment_config, tmp_path):
        with pytest.raises(CheckpointError):
            evaluate_checkpoint(str(tmp_path / "missing.ckpt"), experiment_config)
