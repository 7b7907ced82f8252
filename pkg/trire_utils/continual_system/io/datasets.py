# io/datasets.py

"""
IO module for datasets.
Reads and writes IDX image/label files, builds split-task streams for the
Class-IL and Task-IL protocols, synthesises Gaussian-blob task streams and
yields seeded minibatches.
"""

import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ..core.exceptions import DataError, FormatError, InputError
from ..core.numeric import DTYPE, derive_rng
from ..utils.cache_manager import cached
from ..utils.path_utils import file_fingerprint, normalize_path

import logging
logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_HEADER = 16
IDX_LABELS_HEADER = 8
CENTER_RADIUS = 0.25
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

class Split(NamedTuple):
    """Columnar set of examples: row i of features carries global class labels[i]."""
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, index: np.ndarray) -> "Split":
        return Split(self.features[index], self.labels[index])

    @classmethod
    def empty(cls, n_features: int) -> "Split":
        return cls(np.zeros((0, n_features), dtype=DTYPE), np.zeros(0, dtype=np.int64))

class ImageDataset(NamedTuple):
    """Source dataset with its original train/test partition."""
    train: Split
    test: Split

@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    classes: Tuple[int, ...]

@dataclass(frozen=True)
class TaskData:
    spec: TaskSpec
    train: Split
    test: Split

@dataclass
class TaskStream:
    """Ordered tasks over a single-head label space of n_classes."""
    tasks: List[TaskData]
    n_classes: int
    n_features: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    def task_mask(self, task_id: int) -> np.ndarray:
        mask = np.zeros(self.n_classes, dtype=bool)
        mask[list(self.tasks[task_id].spec.classes)] = True
        return mask

    def joint(self, seed: int) -> "TaskStream":
        """All tasks merged into one (train shuffled with a seeded permutation)."""
        classes = tuple(c for t in self.tasks for c in t.spec.classes)
        train = _concat([t.train for t in self.tasks], self.n_features)
        test = _concat([t.test for t in self.tasks], self.n_features)
        order = derive_rng(seed, "joint_shuffle").permutation(len(train))
        return TaskStream([TaskData(TaskSpec(0, classes), train.take(order), test)],
                          self.n_classes, self.n_features, dict(self.meta, joint=True))

def _concat(splits: Sequence[Split], n_features: int) -> Split:
    if not splits:
        return Split.empty(n_features)
    return Split(np.concatenate([s.features for s in splits]), np.concatenate([s.labels for s in splits]))

# --- IDX ---

def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise DataError(f"Cannot read dataset file {path}: {e}") from e

def _parse_idx_images(payload: bytes, path: str) -> np.ndarray:
    if len(payload) < IDX_IMAGES_HEADER:
        raise FormatError(f"{path}: truncated header, file ends at byte offset {len(payload)} (need {IDX_IMAGES_HEADER})")
    magic, count, rows, cols = struct.unpack_from(">IIII", payload, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0 (expected 0x{IDX_IMAGES_MAGIC:08x})")
    expected_end = IDX_IMAGES_HEADER + count * rows * cols
    if len(payload) < expected_end:
        raise FormatError(f"{path}: truncated payload, file ends at byte offset {len(payload)} but {count} images of {rows}x{cols} end at {expected_end}")
    if len(payload) > expected_end:
        raise FormatError(f"{path}: unexpected trailing bytes starting at byte offset {expected_end}")
    return np.frombuffer(payload, dtype=np.uint8, count=count * rows * cols, offset=IDX_IMAGES_HEADER).reshape(count, rows * cols)

def _parse_idx_labels(payload: bytes, path: str) -> np.ndarray:
    if len(payload) < IDX_LABELS_HEADER:
        raise FormatError(f"{path}: truncated header, file ends at byte offset {len(payload)} (need {IDX_LABELS_HEADER})")
    magic, count = struct.unpack_from(">II", payload, 0)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0 (expected 0x{IDX_LABELS_MAGIC:08x})")
    expected_end = IDX_LABELS_HEADER + count
    if len(payload) < expected_end:
        raise FormatError(f"{path}: truncated payload, file ends at byte offset {len(payload)} but {count} labels end at {expected_end}")
    if len(payload) > expected_end:
        raise FormatError(f"{path}: unexpected trailing bytes starting at byte offset {expected_end}")
    return np.frombuffer(payload, dtype=np.uint8, count=count, offset=IDX_LABELS_HEADER)

def _idx_cache_key(images_path: str, labels_path: str) -> str:
    return f"idx:{file_fingerprint(images_path)}:{file_fingerprint(labels_path)}"

@cached("idx_datasets", key_func=_idx_cache_key)
def _load_idx_cached(images_path: str, labels_path: str) -> Split:
    pixels = _parse_idx_images(_read_bytes(images_path), images_path)
    labels = _parse_idx_labels(_read_bytes(labels_path), labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise FormatError(f"{labels_path}: count {labels.shape[0]} at byte offset 4 does not match {pixels.shape[0]} images in {images_path}")
    features = pixels.astype(DTYPE) / 255.0
    out = Split(features, labels.astype(np.int64))
    out.features.setflags(write=False)
    out.labels.setflags(write=False)
    logger.debug(f"Loaded {len(out)} examples from {images_path}")
    return out

def load_idx(images_path: str, labels_path: str) -> Split:
    """
    Load an IDX image file and its label file; pixels are scaled by 1/255.

    Raises:
        DataError: a file is missing or unreadable
        FormatError: bad magic, truncation or count mismatch (message names the byte offset)
    """
    for p in (images_path, labels_path):
        if not p or not os.path.isfile(p):
            raise DataError(f"Dataset file not found: {p!r}")
    return _load_idx_cached(normalize_path(images_path), normalize_path(labels_path))

def encode_idx_images(pixels: np.ndarray) -> bytes:
    """Serialise (count, rows, cols) uint8 pixels as an IDX image payload."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    count, rows, cols = pixels.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + pixels.tobytes()

def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes()

def write_idx(images_path: str, labels_path: str, pixels: np.ndarray, labels: np.ndarray) -> None:
    with open(images_path, "wb") as f:
        f.write(encode_idx_images(pixels))
    with open(labels_path, "wb") as f:
        f.write(encode_idx_labels(labels))

def load_image_dataset(train_images: str, train_labels: str, test_images: str, test_labels: str) -> ImageDataset:
    return ImageDataset(load_idx(train_images, train_labels), load_idx(test_images, test_labels))

def mnist_paths(directory: str) -> dict:
    """Standard MNIST file names under a directory."""
    return {key: os.path.join(directory, name) for key, name in MNIST_FILES.items()}

# --- Task streams ---

def build_split_tasks(source: ImageDataset, n_tasks: int, classes_per_task: int, seed: int,
                      class_order: str = "ascending") -> TaskStream:
    """
    Partition a labelled dataset into disjoint-class tasks.

    Classes go to tasks in ascending label order by default ("random" uses a
    seeded permutation). Each task's train split is a seeded shuffle; test
    splits keep source order.

    Raises:
        InputError: n_tasks * classes_per_task exceeds the distinct classes
    """
    if n_tasks < 1 or classes_per_task < 1:
        raise InputError(f"Need at least one task and one class per task (got T={n_tasks}, c={classes_per_task})")
    classes = np.unique(source.train.labels)
    needed = n_tasks * classes_per_task
    if needed > classes.shape[0]:
        raise InputError(f"T*c = {needed} exceeds the {classes.shape[0]} distinct classes in the dataset")
    if class_order == "ascending":
        order = classes
    elif class_order == "random":
        order = derive_rng(seed, "class_order").permutation(classes)
    else:
        raise InputError(f"Unknown class order '{class_order}'")

    n_features = source.train.features.shape[1]
    tasks = []
    for t in range(n_tasks):
        task_classes = tuple(int(c) for c in order[t * classes_per_task:(t + 1) * classes_per_task])
        train_idx = np.flatnonzero(np.isin(source.train.labels, task_classes))
        train_idx = train_idx[derive_rng(seed, "task_shuffle", t).permutation(train_idx.shape[0])]
        test_idx = np.flatnonzero(np.isin(source.test.labels, task_classes))
        tasks.append(TaskData(TaskSpec(t, task_classes), source.train.take(train_idx), source.test.take(test_idx)))
    n_classes = int(max(source.train.labels.max(), source.test.labels.max() if len(source.test) else 0)) + 1
    logger.info(f"Built {n_tasks} tasks of {classes_per_task} classes: {[t.spec.classes for t in tasks]}")
    return TaskStream(tasks, n_classes, n_features, {"source": "idx", "class_order": class_order})

def synthetic_blobs(n_tasks: int, classes_per_task: int, dim: int, n_per_class: int,
                    separation: float, seed: int) -> TaskStream:
    """
    Gaussian-blob task stream.

    Class k is an isotropic Gaussian around 0.5 + CENTER_RADIUS * d_k for a
    random unit direction d_k, with per-coordinate standard deviation
    CENTER_RADIUS / separation; samples are clipped to [0, 1]. n_per_class
    examples per class go to each of train and test.
    """
    if separation <= 0:
        raise InputError(f"separation must be > 0, got {separation}")
    if n_per_class < 0 or dim < 1:
        raise InputError(f"Invalid blob shape: dim={dim}, n_per_class={n_per_class}")
    n_classes = n_tasks * classes_per_task
    rng = derive_rng(seed, "blobs")
    directions = rng.normal(size=(n_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = 0.5 + CENTER_RADIUS * directions
    spread = CENTER_RADIUS / separation

    def draw(label: int) -> np.ndarray:
        return np.clip(centers[label] + spread * rng.normal(size=(n_per_class, dim)), 0.0, 1.0)

    tasks = []
    for t in range(n_tasks):
        task_classes = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        parts = {"train": [], "test": []}
        for split_name in ("train", "test"):
            for c in task_classes:
                parts[split_name].append((draw(c), np.full(n_per_class, c, dtype=np.int64)))
        train = Split(np.concatenate([p[0] for p in parts["train"]]), np.concatenate([p[1] for p in parts["train"]]))
        test = Split(np.concatenate([p[0] for p in parts["test"]]), np.concatenate([p[1] for p in parts["test"]]))
        train = train.take(derive_rng(seed, "task_shuffle", t).permutation(len(train)))
        tasks.append(TaskData(TaskSpec(t, task_classes), train, test))
    return TaskStream(tasks, n_classes, dim, {"source": "blobs", "separation": separation})

# --- Iteration ---

def minibatches(split: Split, batch_size: int, seed: int, *labels) -> Iterator[Split]:
    """
    Seeded shuffled minibatches over one epoch; the last partial batch is kept.

    The permutation depends only on (seed, labels), e.g. labels = (task, phase, epoch).
    """
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    order = derive_rng(seed, "minibatch", *labels).permutation(n)
    for start in range(0, n, batch_size):
        yield split.take(order[start:start + batch_size])

def validation_split(split: Split, fraction: float = 0.1) -> Tuple[Split, Split]:
    """Hold out the last `fraction` of an already shuffled split."""
    n = len(split)
    n_val = int(n * fraction)
    return split.take(np.arange(n - n_val)), split.take(np.arange(n - n_val, n))
