# analysis/trainer.py

"""
Analysis module for training.
TriRELearner runs the per-task Retain / Revise / Rewind loop: routed masked
updates with rehearsal and consistency losses, the mid-Retain checkpoint,
subnetwork extraction, joint finetuning at the reduced rate, the cumulative
mask merge, the rewind of free weights and their relearning. ContinualLearner
holds the per-task evaluation loop shared with the baselines.
"""

import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.ema import EMAModel, consistency_loss
from ..core.exceptions import ConfigurationError, StateError
from ..core.masks import CWIConfig, SubnetworkMask, extract_subnetwork, intersect, layer_retention, scoring_subset, union
from ..core.model import ActivationCounters, MLPNet, ParamVector, backward, forward, restore, snapshot, task_logit_mask
from ..core.numeric import MaskedAdam, derive_rng, per_sample_ce, softmax_ce
from ..core.rehearsal import MemoryBuffer
from ..io.checkpoint import CheckpointData, save_checkpoint
from ..io.datasets import Split, TaskData, TaskStream, minibatches, validation_split
from .metrics import MetricsReport, TaskAccuracyMatrix, build_report, evaluate, logits_fn

import logging
logger = logging.getLogger(__name__)

LOSS_CHUNK = 512

def checkpoint_epoch_for(percentile: float, epochs_retain: int) -> int:
    """Retain epoch (1-based) after which theta_k is saved: max(1, round(p * E1)), at most E1."""
    return min(epochs_retain, max(1, math.floor(percentile * epochs_retain + 0.5)))

@dataclass(frozen=True)
class TriREConfig:
    """Hyperparameters of one run. Field comments give the usual symbols."""
    lr: float = 0.002                   # eta (Retain, Rewind)
    lr_revise: float = 0.0001           # eta' (Revise)
    rehearsal_weight: float = 0.04      # lambda
    consistency_weight: float = 1.0     # lambda_cr
    gamma: float = 0.2
    kappa: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    ema_decay: float = 0.999            # mu
    ema_rate: float = 0.12              # zeta
    rewind_percentile: float = 0.9
    epochs_retain: int = 3              # E1
    epochs_revise: int = 1              # E2
    epochs_relearn: int = 1             # E3
    batch_size: int = 32
    buffer_size: int = 200
    seed: int = 0
    revise_on: bool = True
    rewind_on: bool = True
    extraction_mode: str = "deterministic"
    criterion: str = "cwi"
    scoring_cap: int = 2048
    evaluate_working: bool = False
    validation: bool = False

    def __post_init__(self):
        if not self.lr > self.lr_revise >= 0:
            raise ConfigurationError(f"Need eta > eta_prime >= 0 (got {self.lr}, {self.lr_revise})")
        if not 0.0 < self.rewind_percentile < 1.0:
            raise ConfigurationError(f"rewind_percentile must lie in (0, 1), got {self.rewind_percentile}")
        if min(self.epochs_retain, self.epochs_revise, self.epochs_relearn) < 1:
            raise ConfigurationError("every phase needs at least one epoch")
        if self.batch_size < 1 or self.buffer_size < 0:
            raise ConfigurationError(f"Invalid batch/buffer size: {self.batch_size}, {self.buffer_size}")

    @property
    def cwi(self) -> CWIConfig:
        return CWIConfig(self.alpha, self.beta, self.gamma, self.kappa, self.scoring_cap, self.criterion, self.extraction_mode)

    @property
    def checkpoint_epoch(self) -> int:
        return checkpoint_epoch_for(self.rewind_percentile, self.epochs_retain)

    @property
    def total_epochs(self) -> int:
        return self.epochs_retain + self.epochs_revise + self.epochs_relearn

@dataclass
class RunRecord:
    """Append-only log of a run. Wall-clock timings are kept apart from the metric rows."""
    losses: List[Dict[str, Any]] = field(default_factory=list)
    accuracy: List[Dict[str, Any]] = field(default_factory=list)
    masks: List[Dict[str, Any]] = field(default_factory=list)
    buffer: List[Dict[str, Any]] = field(default_factory=list)
    counters: List[Dict[str, Any]] = field(default_factory=list)
    validation: List[Dict[str, Any]] = field(default_factory=list)
    events: List[Dict[str, Any]] = field(default_factory=list)
    wall_clock: Dict[str, float] = field(default_factory=dict)

    def log_buffer(self, task_id: int, buffer: MemoryBuffer) -> None:
        self.buffer.append({"task": task_id, "stat": "size", "key": "", "value": float(buffer.size)})
        self.buffer.append({"task": task_id, "stat": "seen", "key": "", "value": float(buffer.seen)})
        for label, count in buffer.class_histogram().items():
            self.buffer.append({"task": task_id, "stat": "class_count", "key": str(label), "value": float(count)})
        for name, value in buffer.loss_quantiles().items():
            self.buffer.append({"task": task_id, "stat": "loss_quantile", "key": name, "value": value})

    def log_mask(self, task_id: int, kind: str, mask: SubnetworkMask) -> None:
        for row in layer_retention(mask):
            self.masks.append(dict({"task": task_id, "mask": kind, "density": mask.density()}, **row))

    def events_of(self, name: str) -> List[Dict[str, Any]]:
        return [e for e in self.events if e["event"] == name]

@dataclass
class RunResult:
    record: RunRecord
    report: MetricsReport
    class_matrix: TaskAccuracyMatrix
    task_matrix: TaskAccuracyMatrix

def split_losses(net: MLPNet, split: Split) -> np.ndarray:
    """Per-sample unmasked CE of the working model over a split."""
    out = np.zeros(len(split))
    for start in range(0, len(split), LOSS_CHUNK):
        stop = min(len(split), start + LOSS_CHUNK)
        logits, _ = forward(net, split.features[start:stop])
        out[start:stop], _ = per_sample_ce(logits, split.labels[start:stop])
    return np.maximum(out, 0.0)

class ContinualLearner:
    """
    Shared per-task loop: train a task, then evaluate every task seen so far
    under both protocols.

    Args:
        n_features: Input width
        n_classes: Size of the single head
        hidden: Hidden widths
        config: Run hyperparameters
    """

    method = "base"

    def __init__(self, n_features: int, n_classes: int, hidden: List[int], config: TriREConfig):
        self.config = config
        self.n_classes = n_classes
        self.net = MLPNet(n_features, hidden, n_classes, derive_rng(config.seed, "init"))
        self.layout = self.net.layout
        self.record = RunRecord()
        self.optimizer_log: List[Tuple[str, float]] = []

    @property
    def eval_model(self):
        return self.net

    def train_task(self, task: TaskData) -> None:
        raise NotImplementedError

    def _training_split(self, task: TaskData) -> Tuple[Split, Optional[Split]]:
        if self.config.validation:
            train, val = validation_split(task.train)
            return train, val
        return task.train, None

    def _log_validation(self, task_id: int, val: Optional[Split]) -> None:
        if val is None or len(val) == 0:
            return
        logits = logits_fn(self.eval_model)(val.features)
        acc = float(np.mean(np.argmax(logits, axis=1) == val.labels))
        self.record.validation.append({"task": task_id, "accuracy": acc})
        logger.info(f"[{self.method}] task {task_id} validation accuracy {acc:.4f}")

    def to_checkpoint(self, meta: Optional[Dict[str, Any]] = None) -> CheckpointData:
        flat = self.net.flat.copy()
        return CheckpointData(self.layout, flat, flat.copy(), np.zeros(self.layout.n_feature, dtype=bool), None, None,
                              dict(meta or {}, method=self.method))

    def run(self, stream: TaskStream, workers: int = 1, checkpoint_dir: Optional[str] = None,
            ece_bins: int = 10) -> RunResult:
        n = len(stream)
        class_matrix, task_matrix = TaskAccuracyMatrix(n), TaskAccuracyMatrix(n)
        for task in stream.tasks:
            tid = task.spec.task_id
            start = time.perf_counter()
            self.train_task(task)
            self.record.wall_clock[f"task_{tid}"] = time.perf_counter() - start
            for protocol, matrix in (("class_il", class_matrix), ("task_il", task_matrix)):
                accs = evaluate(self.eval_model, stream, protocol, upto=tid, workers=workers)
                matrix.set_row(tid, accs)
                for j, acc in enumerate(accs):
                    self.record.accuracy.append({"after_task": tid, "eval_task": j, "protocol": protocol, "accuracy": float(acc)})
            logger.info(f"[{self.method}] after task {tid}: Class-IL {np.mean(class_matrix.values[tid, :tid + 1]):.4f}")
            if checkpoint_dir:
                save_checkpoint(os.path.join(checkpoint_dir, f"task_{tid}.ckpt"), self.to_checkpoint({"task": tid, "seed": self.config.seed}))
        report = build_report(self.eval_model, stream, self.method, self.config.seed, ece_bins,
                              class_matrix, task_matrix, workers)
        return RunResult(self.record, report, class_matrix, task_matrix)

class TriRELearner(ContinualLearner):
    """
    Working model, EMA mirror, rehearsal buffer and cumulative mask S.

    Each purpose (buffer sampling, EMA gate, reservoir, extraction, scoring)
    draws from its own seed-derived generator.
    """

    method = "trire"

    def __init__(self, n_features: int, n_classes: int, hidden: List[int], config: TriREConfig):
        super().__init__(n_features, n_classes, hidden, config)
        self.ema = EMAModel.from_net(self.net, config.ema_decay, config.ema_rate)
        self.buffer = MemoryBuffer(config.buffer_size, n_features)
        self.cumulative = SubnetworkMask.empty(self.layout)
        self.current: Optional[SubnetworkMask] = None
        self.theta_k: Optional[ParamVector] = None
        self.counters = ActivationCounters(hidden)
        self.phase = "idle"
        self._buffer_rng = derive_rng(config.seed, "buffer_sample")
        self._ema_rng = derive_rng(config.seed, "ema_gate")
        self._reservoir_rng = derive_rng(config.seed, "reservoir")
        self._extract_rng = derive_rng(config.seed, "extraction")

    @property
    def eval_model(self):
        return self.net if self.config.evaluate_working else self.ema

    # --- Routing ---

    def route(self, feature_mask: np.ndarray) -> np.ndarray:
        """Full-vector update mask: the given f_theta positions plus all of g_theta."""
        return self.layout.full_mask(feature_mask, head=True)

    # --- Single steps ---

    def current_step(self, batch: Split, update_mask: np.ndarray, optimizer: MaskedAdam, count: bool = False) -> float:
        """One masked step on a D_t minibatch (plain CE over all classes)."""
        logits, trace = forward(self.net, batch.features,
                                self.config.kappa if count else None, self.counters if count else None)
        loss, grad_logits = softmax_ce(logits, batch.labels)
        self.net.update(optimizer, backward(self.net, trace, grad_logits), update_mask)
        return loss

    def buffer_step(self, update_mask: np.ndarray, optimizer: MaskedAdam) -> Optional[float]:
        """
        One masked step on a D_m minibatch with lambda * L_er + lambda_cr * L_cr.

        Skipped (None) when the buffer is empty or no f_theta parameter is routed here.
        """
        if self.buffer.is_empty() or not update_mask[self.layout.feature_slice].any():
            return None
        batch = self.buffer.sample_batch(self.config.batch_size, self._buffer_rng)
        consistency = consistency_loss(self.net, self.ema, batch.features)
        er_loss, er_grad = softmax_ce(consistency.logits, batch.labels)
        grad_logits = self.config.rehearsal_weight * er_grad + self.config.consistency_weight * consistency.grad_logits
        self.net.update(optimizer, backward(self.net, consistency.trace, grad_logits), update_mask)
        return self.config.rehearsal_weight * er_loss + self.config.consistency_weight * consistency.loss

    def _epoch(self, task_id: int, phase: str, epoch: int, train: Split, optimizer: MaskedAdam,
               current_mask: np.ndarray, buffer_mask: Optional[np.ndarray], count: bool) -> None:
        cur_losses, buf_losses, steps = [], [], 0
        for batch in minibatches(train, self.config.batch_size, self.config.seed, task_id, phase, epoch):
            cur_losses.append(self.current_step(batch, current_mask, optimizer, count))
            if buffer_mask is not None:
                buf = self.buffer_step(buffer_mask, optimizer)
                if buf is not None:
                    buf_losses.append(buf)
            self.ema.maybe_update(self.net.flat, self._ema_rng)
            steps += 1
        row = {"task": task_id, "phase": phase, "epoch": epoch, "steps": steps,
               "loss_current": float(np.mean(cur_losses)) if cur_losses else float("nan"),
               "loss_buffer": float(np.mean(buf_losses)) if buf_losses else float("nan")}
        self.record.losses.append(row)
        logger.debug(f"task {task_id} {phase} epoch {epoch}: L_t={row['loss_current']:.4f} L_m={row['loss_buffer']:.4f}")

    # --- Phases ---

    def retain_phase(self, task_id: int, train: Split) -> None:
        """
        Train free weights (not in S) on D_t and S on D_m, counting k-WTA winners;
        save theta_k at the end of the checkpoint epoch.
        """
        if len(train) == 0:
            raise StateError(f"Task {task_id} has an empty training split")
        self.phase = "retain"
        self.counters.reset()
        self.theta_k = None
        optimizer = MaskedAdam(self.layout.n_total, self.config.lr, "retain", self.optimizer_log)
        current_mask = self.route(~self.cumulative.weights)
        buffer_mask = self.route(self.cumulative.weights)
        k = self.config.checkpoint_epoch
        for epoch in range(self.config.epochs_retain):
            self._epoch(task_id, "retain", epoch, train, optimizer, current_mask, buffer_mask, count=True)
            if epoch + 1 == k:
                self.theta_k = snapshot(self.net)
                self.record.events.append({"task": task_id, "event": "checkpoint", "epoch": epoch + 1})
        logger.info(f"Task {task_id}: retain done ({self.config.epochs_retain} epochs, theta_k at epoch {k})")

    def extract(self, task_id: int, train: Split, classes: Optional[Sequence[int]] = None) -> SubnetworkMask:
        """Extract S_t from the activation counters and weight scores (CE masked to the task classes)."""
        self.phase = "extract"
        scoring_rng = derive_rng(self.config.seed, "scoring", task_id)
        current = scoring_subset((train.features, train.labels), self.config.scoring_cap, scoring_rng)
        contents = self.buffer.contents()
        buffer_set = (contents.features, contents.labels) if len(contents.labels) else None
        if classes is None:
            classes = [int(c) for c in np.unique(train.labels)]
        class_mask = task_logit_mask(classes, self.n_classes)
        self.current = extract_subnetwork(self.net, self.counters, self.config.cwi, current, buffer_set,
                                          self._extract_rng, class_mask)
        for l, counts in enumerate(self.counters.counts):
            for neuron, value in enumerate(counts):
                self.record.counters.append({"task": task_id, "layer": l, "neuron": neuron, "count": int(value)})
        self.record.log_mask(task_id, "current", self.current)
        return self.current

    def revise_phase(self, task_id: int, train: Split) -> None:
        """Finetune outside S and S_t's overlap on D_t, the overlap on D_m, both at eta'."""
        if self.current is None:
            raise StateError("revise_phase needs an extracted subnetwork")
        self.phase = "revise"
        overlap = intersect(self.cumulative, self.current)
        optimizer = MaskedAdam(self.layout.n_total, self.config.lr_revise, "revise", self.optimizer_log)
        current_mask = self.route(~overlap.weights)
        buffer_mask = self.route(overlap.weights)
        for epoch in range(self.config.epochs_revise):
            self._epoch(task_id, "revise", epoch, train, optimizer, current_mask, buffer_mask, count=False)

    def merge_and_rewind(self, task_id: int, rewind: bool = True) -> int:
        """
        S <- S | S_t, then restore every f_theta parameter outside the new S
        to theta_k. Returns the number of restored positions.
        """
        if self.current is None:
            raise StateError("merge_and_rewind needs an extracted subnetwork")
        before = self.cumulative.density()
        self.cumulative = union(self.cumulative, self.current)
        self.record.log_mask(task_id, "cumulative", self.cumulative)
        logger.debug(f"Task {task_id}: cumulative density {before:.4f} -> {self.cumulative.density():.4f}")
        if not rewind:
            return 0
        if self.theta_k is None:
            raise StateError("No theta_k checkpoint saved for this task")
        subset = self.layout.full_mask(~self.cumulative.weights, head=False)
        restore(self.net, self.theta_k, subset)
        restored = int(subset.sum())
        self.record.events.append({"task": task_id, "event": "restore", "params": restored})
        return restored

    def relearn_phase(self, task_id: int, train: Split) -> None:
        """Relearn the rewound (free) weights and g_theta on D_t at eta."""
        self.phase = "relearn"
        optimizer = MaskedAdam(self.layout.n_total, self.config.lr, "relearn", self.optimizer_log)
        current_mask = self.route(~self.cumulative.weights)
        for epoch in range(self.config.epochs_relearn):
            self._epoch(task_id, "relearn", epoch, train, optimizer, current_mask, None, count=False)

    def update_buffer(self, task_id: int, train: Split) -> None:
        self.buffer.refresh_losses(self.net)
        self.buffer.update_from_task(train.features, train.labels, split_losses(self.net, train), task_id, self._reservoir_rng)
        self.record.log_buffer(task_id, self.buffer)

    def train_task(self, task: TaskData) -> None:
        """Retain, extract, (Revise), merge, (Rewind and relearn), then update the buffer."""
        tid = task.spec.task_id
        train, val = self._training_split(task)
        self.retain_phase(tid, train)
        self.extract(tid, train, task.spec.classes)
        if self.config.revise_on:
            self.revise_phase(tid, train)
        self.merge_and_rewind(tid, rewind=self.config.rewind_on)
        if self.config.rewind_on:
            self.relearn_phase(tid, train)
        self.update_buffer(tid, train)
        self.phase = "idle"
        self._log_validation(tid, val)

    def to_checkpoint(self, meta: Optional[Dict[str, Any]] = None) -> CheckpointData:
        return CheckpointData(
            self.layout, self.net.flat.copy(), self.ema.params.copy(), self.cumulative.weights.copy(),
            None if self.theta_k is None else self.theta_k.values.copy(), self.buffer,
            dict(meta or {}, method=self.method, ema_decay=self.ema.decay, ema_update_rate=self.ema.update_rate))
