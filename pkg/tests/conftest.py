import numpy as np
import pytest

from trire_utils.continual_system.analysis.trainer import TriREConfig
from trire_utils.continual_system.io.datasets import synthetic_blobs
from trire_utils.continual_system.utils.cache_manager import clear_all_caches
from trire_utils.continual_system.utils.config_manager import apply_overrides, load_config

@pytest.fixture(autouse=True)
def _isolated_environment(monkeypatch):
    monkeypatch.delenv("TRIRE_OUTPUT_ROOT", raising=False)
    monkeypatch.delenv("TRIRE_THREADS", raising=False)
    clear_all_caches()
    yield
    clear_all_caches()

@pytest.fixture
def blob_stream():
    """Three well separated 2-class tasks in 6 dimensions."""
    return synthetic_blobs(n_tasks=3, classes_per_task=2, dim=6, n_per_class=30, separation=8.0, seed=0)

@pytest.fixture
def small_config():
    return TriREConfig(lr=0.01, lr_revise=0.001, epochs_retain=3, epochs_revise=1, epochs_relearn=1,
                       batch_size=16, buffer_size=24, seed=0, ema_rate=0.5, ema_decay=0.9, rewind_percentile=0.5)

@pytest.fixture
def experiment_config(tmp_path):
    """A blobs experiment small enough to run every method in a test."""
    overrides = {
        "tasks": 2, "classes_per_task": 2, "blobs_dim": 5, "blobs_per_class": 12,
        "hidden": [8], "epochs": 5, "batch_size": 8, "buffer": 10, "seeds": [0],
        "learning_rate": 0.01, "revise_learning_rate": 0.001, "out": str(tmp_path / "runs"),
    }
    return apply_overrides(load_config(None), overrides, source="test")

def numeric_gradient(f, x, h=1e-6):
    """Central differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        out[i] = (f(x + step) - f(x - step)) / (2 * h)
    return out
