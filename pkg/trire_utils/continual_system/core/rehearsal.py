# core/rehearsal.py

"""
Core module for the rehearsal memory.
A fixed-capacity buffer of past examples maintained with loss-aware balanced
reservoir sampling: the reservoir decides whether an offered example gets a
slot, class balance decides which class gives one up, and the stored loss
decides which of that class's slots goes (lowest loss first).
"""

from collections import Counter
from typing import Any, Dict, NamedTuple, Optional, Sequence

import numpy as np

from .exceptions import InputError, ShapeError
from .model import MLPNet, forward
from .numeric import DTYPE, as_matrix, per_sample_ce

import logging
logger = logging.getLogger(__name__)

DEFAULT_QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)
REFRESH_CHUNK = 512

class BufferBatch(NamedTuple):
    """A minibatch drawn from the buffer."""
    features: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray
    slots: np.ndarray

class MemoryBuffer:
    """
    Fixed-capacity store D_m.

    Slots are kept in parallel arrays; only the first `size` rows are valid.

    Args:
        capacity: Maximum number of stored examples (0 disables rehearsal)
        n_features: Feature width of stored examples
    """

    def __init__(self, capacity: int, n_features: int):
        if capacity < 0:
            raise InputError(f"Buffer capacity must be >= 0, got {capacity}")
        self.capacity = int(capacity)
        self.n_features = int(n_features)
        self.features = np.zeros((self.capacity, self.n_features), dtype=DTYPE)
        self.labels = np.zeros(self.capacity, dtype=np.int64)
        self.task_ids = np.zeros(self.capacity, dtype=np.int64)
        self.losses = np.zeros(self.capacity, dtype=DTYPE)
        self.size = 0
        self.seen = 0
        self.class_counts: Counter = Counter()

    def __len__(self) -> int:
        return self.size

    def is_empty(self) -> bool:
        return self.size == 0

    # --- Maintenance ---

    def _write_slot(self, slot: int, x: np.ndarray, label: int, task_id: int, loss: float) -> None:
        if slot < self.size:
            old = int(self.labels[slot])
            self.class_counts[old] -= 1
            if self.class_counts[old] == 0:
                del self.class_counts[old]
        self.features[slot] = x
        self.labels[slot] = label
        self.task_ids[slot] = task_id
        self.losses[slot] = loss
        self.class_counts[label] += 1

    def _select_victim(self, incoming_label: int, rng: np.random.Generator) -> int:
        """
        Slot to overwrite for an accepted example.

        If the incoming class is already one of the largest, it replaces its own
        lowest-loss slot; otherwise the largest class (seeded choice among ties)
        gives up its lowest-loss slot.
        """
        largest = max(self.class_counts.values())
        tied = sorted(c for c, n in self.class_counts.items() if n == largest)
        if incoming_label in tied:
            donor = incoming_label
        elif len(tied) == 1:
            donor = tied[0]
        else:
            donor = tied[int(rng.integers(0, len(tied)))]
        candidates = np.flatnonzero(self.labels[:self.size] == donor)
        return int(candidates[np.argmin(self.losses[candidates])])

    def update_from_task(self, features: np.ndarray, labels: np.ndarray, losses: np.ndarray,
                         task_id: int, rng: np.random.Generator) -> None:
        """
        Stream one task's examples through the reservoir, in the given order.

        Args:
            features: (n, n_features) examples
            labels: class id per example
            losses: last observed per-sample loss per example (>= 0)
            task_id: task the examples belong to
            rng: generator for the reservoir and tie draws
        """
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        losses = np.asarray(losses, dtype=DTYPE).reshape(-1)
        n = labels.shape[0]
        if losses.shape[0] != n:
            raise ShapeError(f"{losses.shape[0]} losses for {n} examples")
        if n == 0:
            return
        features = as_matrix(features)
        if features.shape != (n, self.n_features):
            raise ShapeError(f"features shape {features.shape} != ({n}, {self.n_features})")
        if np.any(losses < 0):
            raise InputError("Stored losses must be non-negative")
        if self.capacity == 0:
            self.seen += n
            return

        replaced = 0
        for i in range(n):
            self.seen += 1
            label = int(labels[i])
            if self.size < self.capacity:
                self._write_slot(self.size, features[i], label, task_id, float(losses[i]))
                self.size += 1
                continue
            j = int(rng.integers(0, self.seen))
            if j < self.capacity:
                slot = self._select_victim(label, rng)
                self._write_slot(slot, features[i], label, task_id, float(losses[i]))
                replaced += 1
        logger.debug(f"Buffer update for task {task_id}: {n} offered, {replaced} replacements, size {self.size}/{self.capacity}")

    def refresh_losses(self, net: MLPNet) -> None:
        """Recompute stored losses as the current per-sample CE of the working model."""
        for start in range(0, self.size, REFRESH_CHUNK):
            stop = min(self.size, start + REFRESH_CHUNK)
            logits, _ = forward(net, self.features[start:stop])
            losses, _ = per_sample_ce(logits, self.labels[start:stop])
            self.losses[start:stop] = np.maximum(losses, 0.0)

    # --- Sampling ---

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> Optional[BufferBatch]:
        """
        Uniform minibatch; with replacement only when the buffer is smaller than the batch.

        Returns:
            BufferBatch, or None when the buffer is empty
        """
        if batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {batch_size}")
        if self.size == 0:
            return None
        replace = self.size < batch_size
        slots = rng.choice(self.size, size=batch_size, replace=replace)
        return BufferBatch(self.features[slots], self.labels[slots], self.task_ids[slots], slots)

    def contents(self) -> BufferBatch:
        """Every stored example, in slot order."""
        slots = np.arange(self.size)
        return BufferBatch(self.features[:self.size], self.labels[:self.size], self.task_ids[:self.size], slots)

    # --- Inspection ---

    def class_histogram(self) -> Dict[int, int]:
        return {int(c): int(n) for c, n in sorted(self.class_counts.items())}

    def task_histogram(self) -> Dict[int, int]:
        tasks, counts = np.unique(self.task_ids[:self.size], return_counts=True)
        return {int(t): int(n) for t, n in zip(tasks, counts)}

    def loss_quantiles(self, quantiles: Sequence[float] = DEFAULT_QUANTILES) -> Dict[str, float]:
        if self.size == 0:
            return {f"q{q:g}": float("nan") for q in quantiles}
        values = np.quantile(self.losses[:self.size], quantiles)
        return {f"q{q:g}": float(v) for q, v in zip(quantiles, values)}

    def stats(self) -> Dict[str, Any]:
        return {
            "size": self.size,
            "capacity": self.capacity,
            "seen": self.seen,
            "class_histogram": self.class_histogram(),
            "loss_quantiles": self.loss_quantiles(),
        }

    @classmethod
    def from_arrays(cls, capacity: int, n_features: int, features: np.ndarray, labels: np.ndarray,
                    task_ids: np.ndarray, losses: np.ndarray, seen: int) -> "MemoryBuffer":
        """Rebuild a buffer from its stored slots (checkpoint loading)."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        size = labels.shape[0]
        if size > capacity:
            raise ShapeError(f"{size} stored slots exceed capacity {capacity}")
        buf = cls(capacity, n_features)
        buf.features[:size] = np.asarray(features, dtype=DTYPE).reshape(size, n_features)
        buf.labels[:size] = labels
        buf.task_ids[:size] = np.asarray(task_ids, dtype=np.int64)
        buf.losses[:size] = np.asarray(losses, dtype=DTYPE)
        buf.size = size
        buf.seen = int(seen)
        buf.class_counts = Counter(int(c) for c in labels)
        return buf
