# analysis/baselines.py

"""
Analysis module for reference methods.
SGD (sequential fine-tuning), ER (experience rehearsal with the same buffer
machinery as TriRE) and Joint (one task over every class). Baselines train the
whole network for the same total epoch budget as a TriRE task and are
evaluated through the working model.
"""

import os
import time
from typing import List, Optional

import numpy as np

from ..core.exceptions import InputError, StateError
from ..core.model import backward, forward
from ..core.numeric import MaskedAdam, derive_rng, softmax_ce
from ..core.rehearsal import MemoryBuffer
from ..io.checkpoint import CheckpointData, save_checkpoint
from ..io.datasets import Split, TaskData, TaskStream, minibatches
from .metrics import TaskAccuracyMatrix, build_report, evaluate
from .trainer import ContinualLearner, RunResult, TriREConfig, split_losses

import logging
logger = logging.getLogger(__name__)

BASELINES = ("sgd", "er", "joint")

class SGDLearner(ContinualLearner):
    """Plain cross-entropy on each task in turn."""

    method = "sgd"

    def _batch_gradient(self, batch: Split) -> tuple:
        logits, trace = forward(self.net, batch.features)
        loss, grad_logits = softmax_ce(logits, batch.labels)
        return loss, backward(self.net, trace, grad_logits)

    def _extra_gradient(self) -> Optional[tuple]:
        return None

    def _after_task(self, task_id: int, train: Split) -> None:
        pass

    def train_task(self, task: TaskData) -> None:
        tid = task.spec.task_id
        train, val = self._training_split(task)
        if len(train) == 0:
            raise StateError(f"Task {tid} has an empty training split")
        optimizer = MaskedAdam(self.layout.n_total, self.config.lr, "train", self.optimizer_log)
        for epoch in range(self.config.total_epochs):
            losses = []
            for batch in minibatches(train, self.config.batch_size, self.config.seed, tid, "train", epoch):
                loss, grads = self._batch_gradient(batch)
                extra = self._extra_gradient()
                if extra is not None:
                    loss += extra[0]
                    grads = grads + extra[1]
                self.net.update(optimizer, grads)
                losses.append(loss)
            self.record.losses.append({"task": tid, "phase": "train", "epoch": epoch, "steps": len(losses),
                                       "loss_current": float(np.mean(losses)), "loss_buffer": float("nan")})
        self._after_task(tid, train)
        self._log_validation(tid, val)

class ERLearner(SGDLearner):
    """Cross-entropy on D_t plus lambda times cross-entropy on a buffer minibatch, in one step."""

    method = "er"

    def __init__(self, n_features: int, n_classes: int, hidden: List[int], config: TriREConfig):
        super().__init__(n_features, n_classes, hidden, config)
        self.buffer = MemoryBuffer(config.buffer_size, n_features)
        self._buffer_rng = derive_rng(config.seed, "buffer_sample")
        self._reservoir_rng = derive_rng(config.seed, "reservoir")

    def _extra_gradient(self) -> Optional[tuple]:
        batch = self.buffer.sample_batch(self.config.batch_size, self._buffer_rng)
        if batch is None:
            return None
        logits, trace = forward(self.net, batch.features)
        loss, grad_logits = softmax_ce(logits, batch.labels)
        weight = self.config.rehearsal_weight
        return weight * loss, backward(self.net, trace, weight * grad_logits)

    def to_checkpoint(self, meta: Optional[dict] = None) -> CheckpointData:
        data = super().to_checkpoint(meta)
        data.buffer = self.buffer
        return data

    def _after_task(self, task_id: int, train: Split) -> None:
        self.buffer.refresh_losses(self.net)
        self.buffer.update_from_task(train.features, train.labels, split_losses(self.net, train), task_id, self._reservoir_rng)
        self.record.log_buffer(task_id, self.buffer)

class JointLearner(SGDLearner):
    """Upper bound: a single task holding every class; only the final accuracy row exists."""

    method = "joint"

    def run(self, stream: TaskStream, workers: int = 1, checkpoint_dir: Optional[str] = None,
            ece_bins: int = 10) -> RunResult:
        joint = stream.joint(self.config.seed)
        start = time.perf_counter()
        self.train_task(joint.tasks[0])
        self.record.wall_clock["task_0"] = time.perf_counter() - start
        n = len(stream)
        class_matrix, task_matrix = TaskAccuracyMatrix(n), TaskAccuracyMatrix(n)
        for protocol, matrix in (("class_il", class_matrix), ("task_il", task_matrix)):
            accs = evaluate(self.net, stream, protocol, workers=workers)
            matrix.set_row(n - 1, accs)
            for j, acc in enumerate(accs):
                self.record.accuracy.append({"after_task": n - 1, "eval_task": j, "protocol": protocol, "accuracy": float(acc)})
        if checkpoint_dir:
            save_checkpoint(os.path.join(checkpoint_dir, f"task_{n - 1}.ckpt"), self.to_checkpoint({"task": n - 1, "seed": self.config.seed}))
        report = build_report(self.net, stream, self.method, self.config.seed, ece_bins, class_matrix, task_matrix, workers)
        return RunResult(self.record, report, class_matrix, task_matrix)

LEARNERS = {"sgd": SGDLearner, "er": ERLearner, "joint": JointLearner}

def run_baseline(kind: str, stream: TaskStream, config: TriREConfig, hidden: List[int],
                 workers: int = 1, ece_bins: int = 10) -> RunResult:
    """
    Raises:
        InputError: unknown baseline kind
    """
    if kind not in LEARNERS:
        raise InputError(f"Unknown baseline '{kind}', expected one of {BASELINES}")
    learner = LEARNERS[kind](stream.n_features, stream.n_classes, hidden, config)
    logger.info(f"Running baseline {kind} (seed {config.seed})")
    return learner.run(stream, workers=workers, ece_bins=ece_bins)
