# analysis/metrics.py

"""
Analysis module for evaluation metrics.
Per-task accuracy under the Class-IL and Task-IL protocols, the task accuracy
matrix, stability/plasticity and their harmonic-mean trade-off, expected
calibration error with its reliability table, and the task confusion matrix.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.ema import EMAModel
from ..core.exceptions import InputError, ShapeError
from ..core.model import MLPNet, forward
from ..core.numeric import softmax_probs
from ..io.datasets import TaskData, TaskStream
from ..utils.batch_processor import BatchProcessor

import logging
logger = logging.getLogger(__name__)

PROTOCOLS = ("class_il", "task_il")
EVAL_CHUNK = 1024

Model = Union[MLPNet, EMAModel, Callable[[np.ndarray], np.ndarray]]

def logits_fn(model: Model) -> Callable[[np.ndarray], np.ndarray]:
    """Features -> logits for a network, an EMA mirror or a plain callable."""
    if isinstance(model, EMAModel):
        model = model.net
    if isinstance(model, MLPNet):
        net = model
        def run(x: np.ndarray) -> np.ndarray:
            if len(x) == 0:
                return np.zeros((0, net.n_classes))
            return np.concatenate([forward(net, x[s:s + EVAL_CHUNK])[0] for s in range(0, len(x), EVAL_CHUNK)])
        return run
    if callable(model):
        return model
    raise InputError(f"Cannot evaluate object of type {type(model).__name__}")

def _tasks(stream: Union[TaskStream, Sequence[TaskData]], upto: Optional[int]) -> List[TaskData]:
    tasks = list(stream.tasks if isinstance(stream, TaskStream) else stream)
    return tasks if upto is None else tasks[:upto + 1]

def _n_classes(stream: Union[TaskStream, Sequence[TaskData]], logits: np.ndarray) -> int:
    return stream.n_classes if isinstance(stream, TaskStream) else logits.shape[1]

def task_accuracy(model: Model, task: TaskData, protocol: str, n_classes: Optional[int] = None) -> float:
    """Top-1 accuracy on one task's test split."""
    if protocol not in PROTOCOLS:
        raise InputError(f"Unknown protocol '{protocol}', expected one of {PROTOCOLS}")
    if len(task.test) == 0:
        return float("nan")
    logits = logits_fn(model)(task.test.features)
    if protocol == "task_il":
        mask = np.zeros(n_classes or logits.shape[1], dtype=bool)
        mask[list(task.spec.classes)] = True
        logits = np.where(mask, logits, -np.inf)
    return float(np.mean(np.argmax(logits, axis=1) == task.test.labels))

def _task_accuracy_job(task: TaskData, model: Model, protocol: str, n_classes: Optional[int]) -> float:
    return task_accuracy(model, task, protocol, n_classes)

def evaluate(model: Model, stream: Union[TaskStream, Sequence[TaskData]], protocol: str,
             upto: Optional[int] = None, workers: int = 1) -> np.ndarray:
    """
    Per-task accuracy for tasks 0..upto (all tasks by default).

    Task-IL restricts the argmax to each task's own classes. Read-only on the model.
    """
    tasks = _tasks(stream, upto)
    n_classes = stream.n_classes if isinstance(stream, TaskStream) else None
    if workers > 1 and len(tasks) > 1:
        processor = BatchProcessor(max_workers=workers, show_progress=False)
        values = processor.process_items(tasks, _task_accuracy_job, model=model, protocol=protocol, n_classes=n_classes)
    else:
        values = [task_accuracy(model, t, protocol, n_classes) for t in tasks]
    return np.asarray(values, dtype=float)

class TaskAccuracyMatrix:
    """A[i][j]: accuracy on task j after training task i; entries above the diagonal stay unset."""

    def __init__(self, n_tasks: int):
        self.n_tasks = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)

    def set_row(self, after_task: int, accuracies: Sequence[float]) -> None:
        accuracies = np.asarray(accuracies, dtype=float)
        if accuracies.shape[0] != after_task + 1:
            raise ShapeError(f"row {after_task} needs {after_task + 1} entries, got {accuracies.shape[0]}")
        if np.any((accuracies < 0) | (accuracies > 1)):
            raise InputError("accuracies must lie in [0, 1]")
        self.values[after_task, :after_task + 1] = accuracies

    def get(self, i: int, j: int) -> float:
        return float(self.values[i, j])

    def is_complete(self) -> bool:
        return not np.isnan(self.values[np.tril_indices(self.n_tasks)]).any()

    def rows(self) -> List[Dict[str, Any]]:
        """Long-form populated entries for CSV export."""
        return [{"after_task": i, "eval_task": j, "accuracy": float(self.values[i, j])}
                for i in range(self.n_tasks) for j in range(i + 1) if not np.isnan(self.values[i, j])]

def accuracy_matrix(rows: Sequence[Sequence[float]]) -> TaskAccuracyMatrix:
    """Build a matrix from per-task evaluation rows (row i has i+1 entries)."""
    matrix = TaskAccuracyMatrix(len(rows))
    for i, row in enumerate(rows):
        matrix.set_row(i, row)
    return matrix

def stability_plasticity(matrix: Union[TaskAccuracyMatrix, np.ndarray]) -> Tuple[float, float, float]:
    """
    Stability S = mean of A[T-1][j] for j < T-1; plasticity P = mean of A[i][i];
    trade-off = 2SP / (S + P), defined as 0 when S + P = 0.

    Raises:
        InputError: fewer than two tasks, or an unpopulated entry
    """
    values = matrix.values if isinstance(matrix, TaskAccuracyMatrix) else np.asarray(matrix, dtype=float)
    n = values.shape[0]
    if n < 2:
        raise InputError("Stability needs at least two tasks")
    if np.isnan(values[np.tril_indices(n)]).any():
        raise InputError("Accuracy matrix is not populated on and below the diagonal")
    stability = float(np.mean(values[n - 1, :n - 1]))
    plasticity = float(np.mean(np.diag(values)))
    total = stability + plasticity
    tradeoff = 0.0 if total == 0 else 2.0 * stability * plasticity / total
    return stability, plasticity, tradeoff

def _bin_index(confidences: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((confidences * bins).astype(np.int64), bins - 1)

def _check_calibration_inputs(confidences, correct, bins) -> Tuple[np.ndarray, np.ndarray]:
    conf = np.asarray(confidences, dtype=float).reshape(-1)
    corr = np.asarray(correct, dtype=bool).reshape(-1)
    if conf.shape != corr.shape:
        raise ShapeError(f"{conf.shape[0]} confidences for {corr.shape[0]} correctness flags")
    if bins < 1:
        raise InputError(f"bins must be >= 1, got {bins}")
    if conf.size and (conf.min() < 0 or conf.max() > 1):
        raise InputError("confidences must lie in [0, 1]")
    return conf, corr

def reliability_table(confidences: Sequence[float], correct: Sequence[bool], bins: int = 10) -> List[Dict[str, Any]]:
    """Per equal-width bin: bounds, count, accuracy and mean confidence (NaN when empty)."""
    conf, corr = _check_calibration_inputs(confidences, correct, bins)
    idx = _bin_index(conf, bins)
    rows = []
    for b in range(bins):
        members = idx == b
        count = int(members.sum())
        rows.append({
            "bin": b,
            "lower": b / bins,
            "upper": (b + 1) / bins,
            "count": count,
            "accuracy": float(corr[members].mean()) if count else float("nan"),
            "confidence": float(conf[members].mean()) if count else float("nan"),
        })
    return rows

def ece(confidences: Sequence[float], correct: Sequence[bool], bins: int = 10) -> float:
    """Expected calibration error: sum over bins of (n_b / N) * |acc_b - conf_b|."""
    conf, corr = _check_calibration_inputs(confidences, correct, bins)
    n = conf.shape[0]
    if n == 0:
        return 0.0
    idx = _bin_index(conf, bins)
    total = 0.0
    for b in range(bins):
        members = idx == b
        count = int(members.sum())
        if count:
            total += (count / n) * abs(float(corr[members].mean()) - float(conf[members].mean()))
    return float(total)

def class_to_task(stream: Union[TaskStream, Sequence[TaskData]], n_classes: int) -> np.ndarray:
    """Task id per class (-1 for classes no task owns)."""
    lookup = np.full(n_classes, -1, dtype=np.int64)
    for t in _tasks(stream, None):
        lookup[list(t.spec.classes)] = t.spec.task_id
    return lookup

def task_confusion(model: Model, stream: Union[TaskStream, Sequence[TaskData]], upto: Optional[int] = None) -> np.ndarray:
    """
    Row i: share of task i's test samples whose Class-IL prediction falls in each task.

    Predictions of classes owned by no evaluated task are not counted, so
    rows are renormalised over the evaluated tasks. A task with an empty test
    split, or whose predictions all fall outside the evaluated classes, gets a
    row of NaN, as task_accuracy does.
    """
    tasks = _tasks(stream, upto)
    n = len(tasks)
    run = logits_fn(model)
    out = np.full((n, n), np.nan)
    lookup = None
    for i, task in enumerate(tasks):
        if len(task.test) == 0:
            continue
        logits = run(task.test.features)
        if lookup is None:
            lookup = class_to_task(tasks, _n_classes(stream, logits))
        predicted = lookup[np.argmax(logits, axis=1)]
        predicted = predicted[predicted >= 0]
        counts = np.bincount(predicted, minlength=n)[:n].astype(float)
        if counts.sum() > 0:
            out[i] = counts / counts.sum()
    return out

def recency_share(confusion: np.ndarray) -> float:
    """Mean share assigned to the final task over the non-empty rows of earlier tasks."""
    shares = confusion[:-1, -1]
    shares = shares[~np.isnan(shares)]
    if shares.size == 0:
        return float("nan")
    return float(np.mean(shares))

def confidence_and_correctness(model: Model, stream: Union[TaskStream, Sequence[TaskData]],
                               upto: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Max softmax probability and Class-IL correctness over every evaluated test sample."""
    run = logits_fn(model)
    confs, corrs = [], []
    for task in _tasks(stream, upto):
        if len(task.test) == 0:
            continue
        probs = softmax_probs(run(task.test.features))
        confs.append(probs.max(axis=1))
        corrs.append(np.argmax(probs, axis=1) == task.test.labels)
    if not confs:
        return np.zeros(0), np.zeros(0, dtype=bool)
    return np.concatenate(confs), np.concatenate(corrs)

@dataclass
class MetricsReport:
    """Summary of one run (or one checkpoint evaluation)."""
    method: str
    seed: int
    n_tasks: int
    class_il: float
    task_il: float
    class_il_per_task: List[float]
    task_il_per_task: List[float]
    stability: Optional[float]
    plasticity: Optional[float]
    tradeoff: Optional[float]
    ece: float
    ece_bins: int
    recency_share: Optional[float]
    confusion: List[List[float]] = field(default_factory=list)
    accuracy_matrix_class_il: Optional[List[List[Optional[float]]]] = None
    accuracy_matrix_task_il: Optional[List[List[Optional[float]]]] = None
    reliability: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return finite_or_none(asdict(self))

def finite_or_none(value: Any) -> Any:
    """JSON-ready copy: non-finite floats become None, numpy scalars become Python numbers."""
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, dict):
        return {k: finite_or_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [finite_or_none(v) for v in value]
    return value

def _matrix_lists(matrix: Optional[TaskAccuracyMatrix]) -> Optional[List[List[Optional[float]]]]:
    if matrix is None:
        return None
    return [[None if np.isnan(v) else float(v) for v in row] for row in matrix.values]

def build_report(model: Model, stream: TaskStream, method: str, seed: int, ece_bins: int = 10,
                 class_matrix: Optional[TaskAccuracyMatrix] = None,
                 task_matrix: Optional[TaskAccuracyMatrix] = None,
                 workers: int = 1) -> MetricsReport:
    """
    Final-state metrics for a model evaluated on every task of the stream.

    Stability and plasticity need a complete Class-IL matrix with at least two
    tasks; they are None otherwise (e.g. the joint baseline, single checkpoints).
    """
    class_acc = evaluate(model, stream, "class_il", workers=workers)
    task_acc = evaluate(model, stream, "task_il", workers=workers)
    stability = plasticity = tradeoff = None
    if class_matrix is not None and class_matrix.n_tasks >= 2 and class_matrix.is_complete():
        stability, plasticity, tradeoff = stability_plasticity(class_matrix)
    conf, corr = confidence_and_correctness(model, stream)
    confusion = task_confusion(model, stream)
    report = MetricsReport(
        method=method, seed=seed, n_tasks=len(stream),
        class_il=float(np.nanmean(class_acc)), task_il=float(np.nanmean(task_acc)),
        class_il_per_task=[float(v) for v in class_acc], task_il_per_task=[float(v) for v in task_acc],
        stability=stability, plasticity=plasticity, tradeoff=tradeoff,
        ece=ece(conf, corr, ece_bins), ece_bins=ece_bins,
        recency_share=recency_share(confusion),
        confusion=confusion.tolist(),
        accuracy_matrix_class_il=_matrix_lists(class_matrix),
        accuracy_matrix_task_il=_matrix_lists(task_matrix),
        reliability=reliability_table(conf, corr, ece_bins),
    )
    logger.info(f"[{method} seed {seed}] Class-IL {report.class_il:.4f}, Task-IL {report.task_il:.4f}, ECE {report.ece:.4f}")
    return report
