import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from trire_utils.continual_system.analysis.baselines import ERLearner, JointLearner, SGDLearner, run_baseline
from trire_utils.continual_system.core.exceptions import InputError
from trire_utils.continual_system.io.checkpoint import load_checkpoint

HIDDEN = [12]

class TestBaselines:
    def test_sgd_trains_every_epoch(self, blob_stream, small_config):
        learner = SGDLearner(blob_stream.n_features, blob_stream.n_classes, HIDDEN, small_config)
        result = learner.run(blob_stream)
        per_task = [r for r in result.record.losses if r["task"] == 0]
        assert len(per_task) == small_config.total_epochs
        assert result.class_matrix.is_complete()
        assert {lr for _, lr in learner.optimizer_log} == {small_config.lr}

    def test_er_fills_buffer(self, blob_stream, small_config):
        learner = ERLearner(blob_stream.n_features, blob_stream.n_classes, HIDDEN, small_config)
        learner.run(blob_stream)
        assert len(learner.buffer) == small_config.buffer_size
        assert learner.record.buffer

    def test_er_checkpoint_carries_buffer(self, blob_stream, small_config, tmp_path):
        learner = ERLearner(blob_stream.n_features, blob_stream.n_classes, HIDDEN, small_config)
        learner.run(blob_stream, checkpoint_dir=str(tmp_path))
        data = load_checkpoint(str(tmp_path / "task_2.ckpt"))
        assert data.meta["method"] == "er"
        assert len(data.buffer) == small_config.buffer_size

    def test_joint_has_only_final_row(self, blob_stream, small_config, tmp_path):
        learner = JointLearner(blob_stream.n_features, blob_stream.n_classes, HIDDEN, small_config)
        result = learner.run(blob_stream, checkpoint_dir=str(tmp_path))
        assert {r["after_task"] for r in result.record.accuracy} == {2}
        assert np.isnan(result.class_matrix.get(0, 0))
        assert result.report.stability is None
        assert (tmp_path / "task_2.ckpt").exists()
        assert list(result.record.wall_clock) == ["task_0"]

    def test_run_baseline_by_name(self, blob_stream, small_config):
        result = run_baseline("sgd", blob_stream, small_config, HIDDEN)
        assert result.report.method == "sgd"
        with pytest.raises(InputError):
            run_baseline("ewc", blob_stream, small_config, HIDDEN)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_er_without_buffer_matches_sgd(self, blob_stream, small_config, seed):
        config = dataclasses.replace(small_config, buffer_size=0, seed=seed)
        sgd = SGDLearner(blob_stream.n_features, blob_stream.n_classes, HIDDEN, config)
        er = ERLearner(blob_stream.n_features, blob_stream.n_classes, HIDDEN, config)
        sgd_result = sgd.run(blob_stream)
        er_result = er.run(blob_stream)
        assert len(er.buffer) == 0
        assert_array_equal(er.net.flat, sgd.net.flat)
        assert_array_equal(er_result.class_matrix.values, sgd_result.class_matrix.values)
        assert [r["loss_current"] for r in er_result.record.losses] == [r["loss_current"] for r in sgd_result.record.losses]
