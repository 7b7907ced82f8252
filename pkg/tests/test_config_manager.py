import pytest

from trire_utils.continual_system.core.exceptions import ConfigurationError
from trire_utils.continual_system.utils.config_manager import (
    DEFAULT_CONFIG, ExperimentConfig, apply_overrides, canonical_key, load_config, parse_config, split_epochs,
)

class TestParsing:
    def test_defaults(self):
        config = load_config(None)
        assert config.method == "trire"
        assert config.get("gamma") == 0.2
        assert config.get("kappa") == 0.5
        assert config.epoch_split() == (3, 1, 1)
        assert config.where("gamma") == "defaults"

    def test_sections_aliases_and_comments(self):
        text = "\n".join([
            "# experiment file",
            "[trire]",
            "eta=0.01 eta_prime=0.001  # rates",
            "gamma=0.3",
            "[experiment]",
            "seeds=4,5",
            "method=er",
        ])
        config = parse_config(text)
        assert config.get("learning_rate") == 0.01
        assert config["revise_learning_rate"] == 0.001
        assert config.get("weight_retention") == 0.3
        assert config.seeds == [4, 5]
        assert config.method == "er"
        assert config.where("gamma") == "line 4"

    def test_booleans(self):
        config = parse_config("revise_on=off\nrewind_on=yes")
        assert config.get("revise_on") is False
        assert config.get("rewind_on") is True

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigurationError, match="line 2"):
            parse_config("gamma=0.3\nsparsity=0.1")

    def test_key_in_wrong_section(self):
        with pytest.raises(ConfigurationError, match="section"):
            parse_config("[data]\ngamma=0.3")

    def test_type_error(self):
        with pytest.raises(ConfigurationError, match="type error"):
            parse_config("batch_size=many")

    def test_bad_choice(self):
        with pytest.raises(ConfigurationError):
            parse_config("method=ewc")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(str(tmp_path / "missing.cfg"))

    def test_canonical_key(self):
        assert canonical_key("trire.zeta") == "ema_update_rate"
        assert canonical_key("ece-bins") == "ece_bins"

class TestValidation:
    def test_revise_rate_must_be_lower(self):
        with pytest.raises(ConfigurationError, match="line 2"):
            parse_config("eta=0.01\neta_prime=0.02")

    def test_percentile_bounds(self):
        for value in ("0", "1", "1.5"):
            with pytest.raises(ConfigurationError):
                parse_config(f"rewind_percentile={value}")

    def test_too_few_epochs(self):
        with pytest.raises(ConfigurationError):
            parse_config("epochs=2")

    def test_explicit_phase_epochs(self):
        config = parse_config("epochs_retain=30 epochs_revise=10 epochs_relearn=10")
        assert config.epoch_split() == (30, 10, 10)
        assert config.trire_config(0).checkpoint_epoch == 27
        with pytest.raises(ConfigurationError):
            parse_config("epochs_retain=30")

    def test_duplicate_seeds(self):
        with pytest.raises(ConfigurationError):
            parse_config("seeds=1,1")

class TestOverrides:
    def test_apply_overrides_copies(self):
        base = load_config(None)
        updated = apply_overrides(base, {"buffer": 500, "seeds": [7], "method": None}, source="--set")
        assert updated.get("buffer") == 500
        assert updated.seeds == [7]
        assert base.get("buffer") == 200
        assert updated.where("buffer") == "--set buffer"
        assert updated.method == "trire"

    def test_invalid_override(self):
        with pytest.raises(ConfigurationError, match="--set"):
            apply_overrides(load_config(None), {"zeta": "2"}, source="--set")

    def test_trire_config(self):
        config = apply_overrides(load_config(None), {"epochs": 10, "zeta": 0.2})
        typed = config.trire_config(3)
        assert typed.seed == 3
        assert typed.ema_rate == 0.2
        assert (typed.epochs_retain, typed.epochs_revise, typed.epochs_relearn) == (6, 2, 2)

    def test_workers_from_environment(self, monkeypatch):
        monkeypatch.setenv("TRIRE_THREADS", "3")
        assert ExperimentConfig().workers == 3

def test_split_epochs():
    assert split_epochs(5) == (3, 1, 1)
    assert split_epochs(50) == (30, 10, 10)
    assert split_epochs(3) == (1, 1, 1)
    with pytest.raises(ConfigurationError):
        split_epochs(2)

def test_every_key_has_a_section():
    names = [key for section in DEFAULT_CONFIG.values() for key in section]
    assert len(names) == len(set(names))
