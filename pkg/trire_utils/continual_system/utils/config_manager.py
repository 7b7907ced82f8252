"""
Configuration module for the continual learning system.
Parses key=value experiment files, applies defaults and overrides, validates
constraints and builds the typed configs the trainer consumes.
"""

import copy
import os
import shlex
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple
import logging

from ..core.exceptions import ConfigurationError
from .batch_processor import default_workers

logger = logging.getLogger(__name__)

# Default configuration values
DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "experiment": {
        "name": "trire",
        "method": "trire",              # trire | sgd | er | joint
        "seeds": [0, 1, 2],
        "out": "trire_runs",
        "save_checkpoints": False,
        "evaluate_working": False,      # diagnostics: evaluate the working model instead of the EMA
        "validation": False,            # hold out the last 10% of each task's train split
    },
    "data": {
        "dataset": "blobs",             # idx | blobs
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "tasks": 5,
        "classes_per_task": 2,
        "class_order": "ascending",     # ascending | random
        "blobs_dim": 20,
        "blobs_per_class": 200,
        "blobs_separation": 8.0,
    },
    "model": {
        "hidden": [256, 256],
    },
    "trire": {
        "learning_rate": 0.002,         # eta
        "revise_learning_rate": 0.0001, # eta'
        "rehearsal_weight": 0.04,       # lambda
        "consistency_weight": 1.0,      # lambda_cr
        "weight_retention": 0.2,        # gamma
        "neuron_retention": 0.5,        # kappa
        "cwi_alpha": 1.0,
        "cwi_beta": 1.0,
        "ema_decay": 0.999,             # mu
        "ema_update_rate": 0.12,        # zeta
        "rewind_percentile": 0.9,
        "epochs": 5,                    # split 3:1:1 into retain/revise/relearn
        "epochs_retain": 0,             # 0 derives from `epochs`
        "epochs_revise": 0,
        "epochs_relearn": 0,
        "batch_size": 32,
        "buffer": 200,
        "revise_on": True,
        "rewind_on": True,
        "extraction_mode": "deterministic",
        "criterion": "cwi",
        "scoring_cap": 2048,
    },
    "eval": {
        "ece_bins": 10,
    },
    "runtime": {
        "workers": 0,                   # 0 reads TRIRE_THREADS (default 1)
        "executor": "thread",           # thread | process
        "progress": False,              # print a completed/total line per finished batch of runs
    },
}

KEY_ALIASES = {
    "eta": "learning_rate",
    "eta_prime": "revise_learning_rate",
    "lambda": "rehearsal_weight",
    "lambda_cr": "consistency_weight",
    "gamma": "weight_retention",
    "kappa": "neuron_retention",
    "alpha": "cwi_alpha",
    "beta": "cwi_beta",
    "mu": "ema_decay",
    "zeta": "ema_update_rate",
}

CHOICES = {
    "method": ("trire", "sgd", "er", "joint"),
    "dataset": ("idx", "blobs"),
    "class_order": ("ascending", "random"),
    "extraction_mode": ("deterministic", "bernoulli"),
    "criterion": ("cwi", "magnitude", "fisher"),
    "executor": ("thread", "process"),
}

KEY_SECTIONS: Dict[str, str] = {key: section for section, values in DEFAULT_CONFIG.items() for key in values}

TRUE_WORDS = ("true", "yes", "on", "1")
FALSE_WORDS = ("false", "no", "off", "0")

def canonical_key(key: str) -> str:
    """Resolve `section.key`, symbol aliases and dashes to a canonical key name."""
    name = key.strip().replace("-", "_")
    if "." in name:
        name = name.split(".", 1)[1]
    return KEY_ALIASES.get(name, name)

def _coerce(key: str, raw: Any, where: str) -> Any:
    default = DEFAULT_CONFIG[KEY_SECTIONS[key]][key]
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                value = raw
            else:
                text = str(raw).strip().lower()
                if text in TRUE_WORDS:
                    value = True
                elif text in FALSE_WORDS:
                    value = False
                else:
                    raise ValueError(f"expected a boolean, got {raw!r}")
        elif isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"expected an integer, got {raw!r}")
            value = int(raw) if not isinstance(raw, str) else int(raw.strip())
        elif isinstance(default, float):
            value = float(raw)
        elif isinstance(default, list):
            items = raw if isinstance(raw, (list, tuple)) else [p for p in str(raw).replace(" ", "").split(",") if p]
            value = [int(p) for p in items]
        else:
            value = str(raw)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{where}: type error for '{key}': {e}") from e
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigurationError(f"{where}: '{key}' must be one of {CHOICES[key]}, got {value!r}")
    return value

@dataclass
class ExperimentConfig:
    """
    Resolved experiment configuration.

    `sections` mirrors DEFAULT_CONFIG; `origins` maps each key to the place it
    was set (e.g. "line 3", "--seed") for diagnostics.
    """
    sections: Dict[str, Dict[str, Any]] = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))
    origins: Dict[str, str] = field(default_factory=dict)

    def get(self, key: str) -> Any:
        key = canonical_key(key)
        return self.sections[KEY_SECTIONS[key]][key]

    def __getitem__(self, key: str) -> Any:
        return self.get(key)

    def where(self, key: str) -> str:
        return self.origins.get(canonical_key(key), "defaults")

    def snapshot(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self.sections)

    @property
    def method(self) -> str:
        return self.get("method")

    @property
    def seeds(self) -> List[int]:
        return list(self.get("seeds"))

    @property
    def hidden(self) -> List[int]:
        return list(self.get("hidden"))

    @property
    def workers(self) -> int:
        return self.get("workers") or default_workers()

    def epoch_split(self) -> Tuple[int, int, int]:
        explicit = (self.get("epochs_retain"), self.get("epochs_revise"), self.get("epochs_relearn"))
        if all(e > 0 for e in explicit):
            return explicit
        return split_epochs(self.get("epochs"))

    def trire_config(self, seed: int):
        """Typed trainer config for one seed."""
        from ..analysis.trainer import TriREConfig
        e1, e2, e3 = self.epoch_split()
        return TriREConfig(
            lr=self.get("learning_rate"),
            lr_revise=self.get("revise_learning_rate"),
            rehearsal_weight=self.get("rehearsal_weight"),
            consistency_weight=self.get("consistency_weight"),
            gamma=self.get("weight_retention"),
            kappa=self.get("neuron_retention"),
            alpha=self.get("cwi_alpha"),
            beta=self.get("cwi_beta"),
            ema_decay=self.get("ema_decay"),
            ema_rate=self.get("ema_update_rate"),
            rewind_percentile=self.get("rewind_percentile"),
            epochs_retain=e1, epochs_revise=e2, epochs_relearn=e3,
            batch_size=self.get("batch_size"),
            buffer_size=self.get("buffer"),
            seed=seed,
            revise_on=self.get("revise_on"),
            rewind_on=self.get("rewind_on"),
            extraction_mode=self.get("extraction_mode"),
            criterion=self.get("criterion"),
            scoring_cap=self.get("scoring_cap"),
            evaluate_working=self.get("evaluate_working"),
            validation=self.get("validation"),
        )

def split_epochs(total: int) -> Tuple[int, int, int]:
    """E1:E2:E3 = 3:1:1 with remainders to E1; needs total >= 3."""
    if total < 3:
        raise ConfigurationError(f"epochs must be >= 3 to give every phase an epoch, got {total}")
    e2 = max(1, int(total / 5 + 0.5))
    e3 = e2
    return total - e2 - e3, e2, e3

def _set(config: ExperimentConfig, raw_key: str, raw_value: Any, where: str, section: Optional[str] = None) -> None:
    key = canonical_key(raw_key)
    if key not in KEY_SECTIONS:
        raise ConfigurationError(f"{where}: unknown key '{raw_key}'")
    if section is not None and KEY_SECTIONS[key] != section:
        raise ConfigurationError(f"{where}: key '{raw_key}' does not belong to section [{section}]")
    config.sections[KEY_SECTIONS[key]][key] = _coerce(key, raw_value, where)
    config.origins[key] = where

def _origin_rank(where: str) -> int:
    if where == "defaults":
        return -1
    if where.startswith("line "):
        return int(where.split()[1])
    return 1 << 30

def validate(config: ExperimentConfig) -> ExperimentConfig:
    """
    Check value constraints, naming where the offending key was set.

    Raises:
        ConfigurationError
    """
    def fail(key: str, message: str) -> None:
        raise ConfigurationError(f"{config.where(key)}: {message}")

    g = config.get
    if g("revise_learning_rate") < 0:
        fail("revise_learning_rate", "eta_prime must be >= 0")
    if not g("learning_rate") > g("revise_learning_rate"):
        later = max(("learning_rate", "revise_learning_rate"), key=lambda k: _origin_rank(config.where(k)))
        fail(later, f"eta ({g('learning_rate')}) must exceed eta_prime ({g('revise_learning_rate')})")
    if not 0.0 < g("rewind_percentile") < 1.0:
        fail("rewind_percentile", f"rewind_percentile must lie in (0, 1), got {g('rewind_percentile')}")
    for key in ("weight_retention", "neuron_retention"):
        if not 0.0 < g(key) <= 1.0:
            fail(key, f"{key} must lie in (0, 1], got {g(key)}")
    for key in ("cwi_alpha", "cwi_beta", "rehearsal_weight", "consistency_weight"):
        if g(key) < 0:
            fail(key, f"{key} must be >= 0, got {g(key)}")
    if not 0.0 < g("ema_decay") < 1.0:
        fail("ema_decay", f"ema_decay must lie in (0, 1), got {g('ema_decay')}")
    if not 0.0 <= g("ema_update_rate") <= 1.0:
        fail("ema_update_rate", f"ema_update_rate must lie in [0, 1], got {g('ema_update_rate')}")
    explicit = [g("epochs_retain"), g("epochs_revise"), g("epochs_relearn")]
    if any(e < 0 for e in explicit) or (any(e > 0 for e in explicit) and not all(e > 0 for e in explicit)):
        fail("epochs_retain", "epochs_retain/epochs_revise/epochs_relearn must all be >= 1 when any is set")
    if not all(e > 0 for e in explicit) and g("epochs") < 3:
        fail("epochs", f"epochs must be >= 3, got {g('epochs')}")
    for key in ("batch_size", "tasks", "classes_per_task", "scoring_cap", "ece_bins", "blobs_dim"):
        if g(key) < 1:
            fail(key, f"{key} must be >= 1, got {g(key)}")
    for key in ("buffer", "blobs_per_class", "workers"):
        if g(key) < 0:
            fail(key, f"{key} must be >= 0, got {g(key)}")
    if g("blobs_separation") <= 0:
        fail("blobs_separation", "blobs_separation must be > 0")
    if not g("hidden") or any(w < 1 for w in g("hidden")):
        fail("hidden", f"hidden widths must be positive, got {g('hidden')}")
    if not g("seeds"):
        fail("seeds", "at least one seed is required")
    if len(set(g("seeds"))) != len(g("seeds")):
        fail("seeds", f"duplicate seeds in {g('seeds')}")
    return config

def parse_config(text: str) -> ExperimentConfig:
    """
    Parse experiment text into a validated config with defaults applied.

    Format: `#` comments, optional `[section]` headers, one or more
    whitespace-separated key=value pairs per line (shell-style quoting).

    Raises:
        ConfigurationError: unknown key, type error or constraint violation (names the line)
    """
    config = ExperimentConfig()
    section: Optional[str] = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        where = f"line {lineno}"
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in DEFAULT_CONFIG:
                raise ConfigurationError(f"{where}: unknown section [{section}]")
            continue
        try:
            tokens = shlex.split(line, comments=True)
        except ValueError as e:
            raise ConfigurationError(f"{where}: {e}") from e
        for token in tokens:
            if "=" not in token:
                raise ConfigurationError(f"{where}: expected key=value, got '{token}'")
            key, value = token.split("=", 1)
            _set(config, key, value, where, section)
    return validate(config)

def load_config(path: Optional[str]) -> ExperimentConfig:
    """Parse a config file; None gives the defaults."""
    if path is None:
        return validate(ExperimentConfig())
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e}") from e
    logger.debug(f"Loaded configuration from {path}")
    return parse_config(text)

def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any], source: str = "override") -> ExperimentConfig:
    """
    Return a copy with overrides applied and re-validated.

    Keys use the config names or aliases; None values are ignored.
    """
    updated = ExperimentConfig(copy.deepcopy(config.sections), dict(config.origins))
    for key, value in overrides.items():
        if value is None:
            continue
        _set(updated, key, value, f"{source} {key}")
    return validate(updated)
