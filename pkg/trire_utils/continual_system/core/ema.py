# core/ema.py

"""
Core module for the exponential-moving-average model.
Stochastic weight aggregation gated by a single uniform draw per call,
consistency regularisation on output logits and masked inference.
"""

from typing import NamedTuple, Optional, Tuple

import numpy as np

from .exceptions import InputError, ShapeError
from .model import ForwardTrace, MLPNet, ParamVector, forward
from .numeric import as_matrix

import logging
logger = logging.getLogger(__name__)

class EMAModel:
    """
    Mirror of the full working model (f_theta and g_theta).

    Args:
        net: Parameter holder for the mirror
        decay: mu in (0, 1)
        update_rate: zeta in [0, 1]; probability that a call updates the mirror
    """

    def __init__(self, net: MLPNet, decay: float, update_rate: float):
        if not 0.0 < decay < 1.0:
            raise InputError(f"EMA decay must lie in (0, 1), got {decay}")
        if not 0.0 <= update_rate <= 1.0:
            raise InputError(f"EMA update rate must lie in [0, 1], got {update_rate}")
        self.net = net
        self.decay = float(decay)
        self.update_rate = float(update_rate)
        self.updates = 0
        self.calls = 0

    @classmethod
    def from_net(cls, working: MLPNet, decay: float, update_rate: float) -> "EMAModel":
        """Initialise the mirror as an exact copy of the working model."""
        return cls(working.clone(), decay, update_rate)

    @property
    def params(self) -> np.ndarray:
        return self.net.flat

    def maybe_update(self, working_params: np.ndarray, rng: np.random.Generator) -> bool:
        """
        theta_ema <- mu * theta_ema + (1 - mu) * theta when u < zeta, u ~ U[0, 1).

        Exactly one draw is consumed per call. Returns whether the mirror moved.
        """
        if working_params.shape != self.net.flat.shape:
            raise ShapeError(f"working params {working_params.shape} != EMA mirror {self.net.flat.shape}")
        self.calls += 1
        if not rng.random() < self.update_rate:
            return False
        self.net.flat *= self.decay
        self.net.flat += (1.0 - self.decay) * working_params
        self.net.touch()
        self.updates += 1
        return True

    def snapshot(self) -> ParamVector:
        return ParamVector(self.net.flat.copy(), self.net.layout)

class ConsistencyResult(NamedTuple):
    """Consistency loss plus the working-model forward it was computed on."""
    loss: float
    grad_logits: np.ndarray
    logits: np.ndarray
    trace: ForwardTrace

def consistency_loss(net: MLPNet, ema: EMAModel, batch: np.ndarray) -> Optional[ConsistencyResult]:
    """
    Mean over the batch of the squared L2 distance between EMA and working logits.

    The EMA side is a constant; grad_logits is d loss / d working logits,
    i.e. 2 (z_working - z_ema) / batch. Returns None for an empty batch.
    """
    x = as_matrix(batch)
    if x.shape[0] == 0:
        return None
    logits, trace = forward(net, x)
    target, _ = forward(ema.net, x)
    diff = logits - target
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grad = 2.0 * diff / x.shape[0]
    return ConsistencyResult(loss, grad, logits, trace)

def predict(ema: EMAModel, batch: np.ndarray, task_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """EMA logits; classes outside task_mask are set to -inf (Task-IL)."""
    logits, _ = forward(ema.net, batch)
    if task_mask is not None:
        task_mask = np.asarray(task_mask, dtype=bool)
        if task_mask.shape != (logits.shape[1],):
            raise ShapeError(f"task mask length {task_mask.shape} != {logits.shape[1]} classes")
        logits = np.where(task_mask, logits, -np.inf)
    return logits
