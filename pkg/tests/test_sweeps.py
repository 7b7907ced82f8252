import os

import pandas as pd
import pytest

from trire_utils.continual_system.analysis.sweeps import (
    ABLATION_ROWS, sweep_ablation, sweep_hyperparameter, sweep_pruning, sweep_rewind,
)
from trire_utils.continual_system.core.exceptions import ConfigurationError
from trire_utils.continual_system.io.artifacts import AGGREGATE_METRICS, read_json

class TestRewindSweep:
    def test_grid_sorted_and_deduplicated(self, experiment_config, tmp_path):
        root = str(tmp_path / "rewind")
        result = sweep_rewind(experiment_config, [0.5, 0.2, 0.5], root=root)
        assert [p.name for p in result.points] == ["rewind_0.2", "rewind_0.5"]
        for point in result.points:
            assert os.path.isfile(os.path.join(root, point.name, "manifest.json"))
            assert os.path.isfile(os.path.join(root, point.name, "seed_0", "metrics.json"))
            assert read_json(os.path.join(root, point.name, "aggregate.json"))["n_seeds"] == 1
        table = pd.read_csv(result.paths["seed_0"])
        assert list(table["percentile"]) == [0.2, 0.5]
        assert list(table["point"]) == ["rewind_0.2", "rewind_0.5"]
        summary = pd.read_csv(result.paths["summary"])
        assert set(summary["metric"]) >= {"class_il", "tradeoff"}

    def test_percentiles_collapse_to_checkpoint_epochs(self, experiment_config, tmp_path):
        # epochs=5 gives E1=3, so nine percentiles reach only k = 1, 2, 3
        root = tmp_path / "rewind"
        grid = [0.9, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
        result = sweep_rewind(experiment_config, grid, root=str(root))
        assert [p.name for p in result.points] == ["rewind_0.1", "rewind_0.5", "rewind_0.9"]
        assert [p.labels["checkpoint_epoch"] for p in result.points] == [1, 2, 3]
        assert {p.name for p in root.iterdir() if p.is_dir()} == {"rewind_0.1", "rewind_0.5", "rewind_0.9"}
        table = pd.read_csv(result.paths["seed_0"])
        assert len(table) == 3
        assert list(table["checkpoint_epoch"]) == [1, 2, 3]
        assert list(table["percentile"]) == [0.1, 0.5, 0.9]
        summary = pd.read_csv(result.paths["summary"])
        assert len(summary) == 3 * len(AGGREGATE_METRICS)
        assert list(summary.groupby("point").size()) == [len(AGGREGATE_METRICS)] * 3
        events = pd.read_csv(root / "rewind_0.5" / "seed_0" / "events.csv")
        assert set(events[events["event"] == "checkpoint"]["epoch"]) == {2}

    def test_invalid_percentile_rejected_before_training(self, experiment_config, tmp_path):
        root = tmp_path / "rewind"
        with pytest.raises(ConfigurationError):
            sweep_rewind(experiment_config, [0.5, 1.5], root=str(root))
        assert not root.exists()

    def test_empty_grid(self, experiment_config, tmp_path):
        with pytest.raises(ConfigurationError):
            sweep_rewind(experiment_config, [], root=str(tmp_path / "rewind"))

class TestAblation:
    def test_four_configurations(self, experiment_config, tmp_path):
        result = sweep_ablation(experiment_config, root=str(tmp_path / "ablation"))
        names = [name for name, _ in ABLATION_ROWS]
        assert [p.name for p in result.points] == names
        table = pd.read_csv(result.paths["seed_0"])
        assert list(table["point"]) == names
        retain_only = table[table["point"] == "retain_only"].iloc[0]
        assert not retain_only["revise_on"] and not retain_only["rewind_on"]

    def test_phase_switches_reach_the_trainer(self, experiment_config, tmp_path):
        root = tmp_path / "ablation"
        sweep_ablation(experiment_config, root=str(root))
        losses = pd.read_csv(root / "retain_only" / "seed_0" / "losses.csv")
        assert set(losses["phase"]) == {"retain"}
        full = pd.read_csv(root / "full" / "seed_0" / "losses.csv")
        assert set(full["phase"]) == {"retain", "revise", "relearn"}

class TestPruning:
    def test_criteria_in_given_order(self, experiment_config, tmp_path):
        result = sweep_pruning(experiment_config, ["fisher", "magnitude", "fisher"], root=str(tmp_path / "pruning"))
        assert [p.name for p in result.points] == ["fisher", "magnitude"]
        assert list(pd.read_csv(result.paths["seed_0"])["criterion"]) == ["fisher", "magnitude"]

class TestHyperparameter:
    def test_alias_key(self, experiment_config, tmp_path):
        result = sweep_hyperparameter(experiment_config, "gamma", ["0.3", 0.1], root=str(tmp_path / "hyper"))
        assert result.sweep == "hyper_weight_retention"
        assert [p.name for p in result.points] == ["weight_retention_0.1", "weight_retention_0.3"]
        assert os.path.isfile(result.paths["summary"])

    @pytest.mark.parametrize("key", ["method", "seeds", "save_checkpoints", "no_such_key"])
    def test_non_numeric_or_unknown_keys(self, experiment_config, tmp_path, key):
        with pytest.raises(ConfigurationError):
            sweep_hyperparameter(experiment_config, key, [1], root=str(tmp_path / "hyper"))

    def test_bad_value(self, experiment_config, tmp_path):
        with pytest.raises(ConfigurationError):
            sweep_hyperparameter(experiment_config, "kappa", ["half"], root=str(tmp_path / "hyper"))

    def test_out_of_range_value(self, experiment_config, tmp_path):
        with pytest.raises(ConfigurationError):
            sweep_hyperparameter(experiment_config, "kappa", [0.5, 2.0], root=str(tmp_path / "hyper"))
