# core/masks.py

"""
Core module for subnetwork masks.
Neuron selection from activation counters (heterogeneous dropout), per-weight
importance scoring (CWI, magnitude, Fisher), layer-wise weight pruning and the
boolean algebra used to maintain the cumulative mask S.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DegenerateInputError, InputError, ShapeError
from .model import ActivationCounters, MLPNet, ParamLayout, backward, forward, kwta_k, per_sample_squared_grads
from .numeric import per_sample_ce, softmax_ce

import logging
logger = logging.getLogger(__name__)

SampleSet = Tuple[np.ndarray, np.ndarray]  # (features, labels)

EXTRACTION_MODES = ("deterministic", "bernoulli")
PRUNING_CRITERIA = ("cwi", "magnitude", "fisher")
SCORING_CHUNK = 256

@dataclass(frozen=True)
class CWIConfig:
    """
    Extraction settings.

    alpha/beta weight the current-task and buffer gradient terms, gamma is the
    fraction of candidate weights kept per layer and kappa the fraction of
    neurons kept per layer.
    """
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.2
    kappa: float = 0.5
    scoring_cap: int = 2048
    criterion: str = "cwi"
    mode: str = "deterministic"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InputError(f"alpha and beta must be >= 0 (got {self.alpha}, {self.beta})")
        if not 0.0 < self.gamma <= 1.0:
            raise InputError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.kappa <= 1.0:
            raise InputError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.scoring_cap < 1:
            raise InputError(f"scoring_cap must be >= 1, got {self.scoring_cap}")
        if self.criterion not in PRUNING_CRITERIA:
            raise InputError(f"Unknown pruning criterion '{self.criterion}', expected one of {PRUNING_CRITERIA}")
        if self.mode not in EXTRACTION_MODES:
            raise InputError(f"Unknown extraction mode '{self.mode}', expected one of {EXTRACTION_MODES}")

# --- Mask types ---

class NeuronMask:
    """Per hidden layer boolean retention vector."""

    def __init__(self, layers: Sequence[np.ndarray]):
        self.layers: List[np.ndarray] = [np.asarray(l, dtype=bool).copy() for l in layers]

    def retained(self) -> List[int]:
        return [int(l.sum()) for l in self.layers]

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, NeuronMask) and len(self.layers) == len(other.layers)
                and all(np.array_equal(a, b) for a, b in zip(self.layers, other.layers)))

    def __repr__(self) -> str:
        return f"NeuronMask(retained={self.retained()})"

class SubnetworkMask:
    """
    Boolean set over the f_theta parameters (weights and biases).

    The neuron view is derived: a hidden neuron is retained iff its bias is
    in the set. The array is read-only; algebra returns new masks.
    """

    def __init__(self, weights: np.ndarray, layout: ParamLayout):
        weights = np.asarray(weights, dtype=bool)
        if weights.shape != (layout.n_feature,):
            raise ShapeError(f"mask shape {weights.shape} != ({layout.n_feature},)")
        self.weights = weights.copy()
        self.weights.setflags(write=False)
        self.layout = layout

    @classmethod
    def empty(cls, layout: ParamLayout) -> "SubnetworkMask":
        return cls(np.zeros(layout.n_feature, dtype=bool), layout)

    @classmethod
    def full(cls, layout: ParamLayout) -> "SubnetworkMask":
        return cls(np.ones(layout.n_feature, dtype=bool), layout)

    @property
    def neurons(self) -> NeuronMask:
        return NeuronMask([self.weights[self.layout.bias_block(l).slice] for l in range(self.layout.n_hidden_layers)])

    def count(self) -> int:
        return int(self.weights.sum())

    def is_empty(self) -> bool:
        return not self.weights.any()

    def density(self) -> float:
        return density(self)

    def param_mask(self, head: bool = False) -> np.ndarray:
        """Mask over the full parameter vector; head entries set to `head`."""
        return self.layout.full_mask(self.weights, head=head)

    def is_consistent(self) -> bool:
        """True when every retained weight's output neuron is retained."""
        for l in range(self.layout.n_hidden_layers):
            block = self.layout.weight_block(l)
            w = self.weights[block.slice].reshape(block.shape)
            used = w.any(axis=0)
            if np.any(used & ~self.weights[self.layout.bias_block(l).slice]):
                return False
        return True

    def __or__(self, other: "SubnetworkMask") -> "SubnetworkMask":
        return union(self, other)

    def __and__(self, other: "SubnetworkMask") -> "SubnetworkMask":
        return intersect(self, other)

    def __invert__(self) -> "SubnetworkMask":
        return complement(self)

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, SubnetworkMask) and self.layout == other.layout
                and np.array_equal(self.weights, other.weights))

    def __repr__(self) -> str:
        return f"SubnetworkMask(density={self.density():.4f}, neurons={self.neurons.retained()})"

# --- Algebra ---

def _check_aligned(a: SubnetworkMask, b: SubnetworkMask) -> None:
    if a.layout != b.layout:
        raise ShapeError(f"Mask layouts differ: {a.layout} vs {b.layout}")

def union(a: SubnetworkMask, b: SubnetworkMask) -> SubnetworkMask:
    _check_aligned(a, b)
    return SubnetworkMask(a.weights | b.weights, a.layout)

def intersect(a: SubnetworkMask, b: SubnetworkMask) -> SubnetworkMask:
    _check_aligned(a, b)
    return SubnetworkMask(a.weights & b.weights, a.layout)

def complement(a: SubnetworkMask) -> SubnetworkMask:
    return SubnetworkMask(~a.weights, a.layout)

def density(a: SubnetworkMask) -> float:
    """Retained f_theta parameters over all f_theta parameters."""
    return float(a.weights.sum()) / float(a.layout.n_feature)

def layer_retention(mask: SubnetworkMask) -> List[Dict[str, Any]]:
    """Per-layer retained neuron and weight counts, for export."""
    rows = []
    neurons = mask.neurons
    for l in range(mask.layout.n_hidden_layers):
        block = mask.layout.weight_block(l)
        rows.append({
            "layer": l,
            "neurons_retained": int(neurons.layers[l].sum()),
            "neurons_total": int(neurons.layers[l].shape[0]),
            "weights_retained": int(mask.weights[block.slice].sum()),
            "weights_total": int(block.stop - block.start),
        })
    return rows

# --- Neuron selection ---

def extract_neuron_mask(counters: ActivationCounters, kappa: float, mode: str = "deterministic",
                        rng: Optional[np.random.Generator] = None) -> NeuronMask:
    """
    Map activation counts to retained neurons.

    deterministic: keep the ceil(kappa * width) highest counts per layer, ties to the lower index.
    bernoulli: keep neuron i with probability count_i / max count, then top up
        from the highest counts until ceil(kappa * width) are kept.

    Raises:
        DegenerateInputError: every counter is zero
    """
    if mode not in EXTRACTION_MODES:
        raise InputError(f"Unknown extraction mode '{mode}'")
    if not counters.counts or counters.total() == 0:
        raise DegenerateInputError("Activation counters are all zero; run the Retain phase before extraction")
    if mode == "bernoulli" and rng is None:
        raise InputError("bernoulli extraction needs an rng")

    layers = []
    for l, counts in enumerate(counters.counts):
        width = counts.shape[0]
        k = kwta_k(kappa, width)
        order = np.argsort(-counts, kind="stable")
        keep = np.zeros(width, dtype=bool)
        if counts.max() == 0:
            logger.warning(f"Layer {l} never won a k-WTA slot; keeping the first {k} neurons")
        if mode == "deterministic":
            keep[order[:k]] = True
        else:
            peak = counts.max()
            prob = counts / peak if peak > 0 else np.zeros(width)
            keep = rng.random(width) < prob
            missing = k - int(keep.sum())
            if missing > 0:
                candidates = order[~keep[order]]
                keep[candidates[:missing]] = True
        layers.append(keep)
    return NeuronMask(layers)

# --- Weight scoring ---

def scoring_subset(samples: SampleSet, cap: int, rng: np.random.Generator) -> SampleSet:
    """Seeded subset of at most `cap` rows; the whole set when it is small enough."""
    x, y = samples
    if len(y) <= cap:
        return x, y
    idx = np.sort(rng.choice(len(y), size=cap, replace=False))
    return x[idx], y[idx]

def _mean_loss_gradient(net: MLPNet, samples: SampleSet, class_mask: Optional[np.ndarray]) -> np.ndarray:
    x, y = samples
    n = len(y)
    total = np.zeros_like(net.flat)
    for start in range(0, n, SCORING_CHUNK):
        xb, yb = x[start:start + SCORING_CHUNK], y[start:start + SCORING_CHUNK]
        logits, trace = forward(net, xb)
        _, grad_logits = softmax_ce(logits, yb, class_mask)
        total += backward(net, trace, grad_logits) * (len(yb) / n)
    return total

def _nonempty(samples: Optional[SampleSet]) -> bool:
    return samples is not None and len(samples[1]) > 0

def magnitude_scores(net: MLPNet) -> np.ndarray:
    return np.abs(net.flat[net.layout.feature_slice])

def cwi_scores(net: MLPNet, current: SampleSet, buffer: Optional[SampleSet],
               alpha: float, beta: float, class_mask: Optional[np.ndarray]) -> np.ndarray:
    """
    Continual weight importance per f_theta parameter:
    |theta| + alpha * |dL_ce(current, task-masked)/dtheta| + beta * |dL_ce(buffer)/dtheta|.

    The buffer term is dropped when the buffer set is empty or missing.
    """
    if not _nonempty(current):
        raise InputError("cwi_scores needs a nonempty current-task sample set")
    fs = net.layout.feature_slice
    scores = magnitude_scores(net).copy()
    if alpha > 0:
        scores += alpha * np.abs(_mean_loss_gradient(net, current, class_mask)[fs])
    if beta > 0 and _nonempty(buffer):
        scores += beta * np.abs(_mean_loss_gradient(net, buffer, None)[fs])
    return scores

def fisher_scores(net: MLPNet, samples: SampleSet, class_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Empirical Fisher diagonal: mean over samples of the squared per-sample gradient."""
    x, y = samples
    n = len(y)
    if n == 0:
        raise InputError("fisher_scores needs a nonempty sample set")
    total = np.zeros_like(net.flat)
    for start in range(0, n, SCORING_CHUNK):
        xb, yb = x[start:start + SCORING_CHUNK], y[start:start + SCORING_CHUNK]
        logits, trace = forward(net, xb)
        _, probs = per_sample_ce(logits, yb, class_mask)
        grad_logits = probs.copy()
        grad_logits[np.arange(len(yb)), np.asarray(yb, dtype=np.int64)] -= 1.0
        total += per_sample_squared_grads(net, trace, grad_logits)
    return total[net.layout.feature_slice] / n

def weight_scores(net: MLPNet, config: CWIConfig, current: SampleSet, buffer: Optional[SampleSet],
                  class_mask: Optional[np.ndarray]) -> np.ndarray:
    """Scores for the configured pruning criterion."""
    if config.criterion == "magnitude":
        return magnitude_scores(net).copy()
    if config.criterion == "fisher":
        return fisher_scores(net, current, class_mask)
    return cwi_scores(net, current, buffer, config.alpha, config.beta, class_mask)

# --- Subnetwork extraction ---

def prune_weights(layout: ParamLayout, neurons: NeuronMask, scores: np.ndarray, gamma: float) -> SubnetworkMask:
    """
    Keep, per layer, the top ceil(gamma * candidates) weights whose output
    neuron is retained (ties to the lower flat index), plus retained biases.
    """
    if scores.shape != (layout.n_feature,):
        raise ShapeError(f"score vector shape {scores.shape} != ({layout.n_feature},)")
    if len(neurons.layers) != layout.n_hidden_layers:
        raise ShapeError("neuron mask does not match the network depth")
    keep = np.zeros(layout.n_feature, dtype=bool)
    for l in range(layout.n_hidden_layers):
        w_block, b_block = layout.weight_block(l), layout.bias_block(l)
        retained = neurons.layers[l]
        if retained.shape != (w_block.shape[1],):
            raise ShapeError(f"layer {l} neuron mask length {retained.shape} != {w_block.shape[1]}")
        candidates = np.flatnonzero(np.broadcast_to(retained[None, :], w_block.shape).reshape(-1))
        n_keep = math.ceil(gamma * candidates.size - 1e-9)
        if n_keep > 0:
            layer_scores = scores[w_block.slice][candidates]
            order = np.argsort(-layer_scores, kind="stable")[:n_keep]
            keep[w_block.start + candidates[order]] = True
        keep[b_block.start + np.flatnonzero(retained)] = True
    return SubnetworkMask(keep, layout)

def extract_subnetwork(net: MLPNet, counters: ActivationCounters, config: CWIConfig,
                       current: SampleSet, buffer: Optional[SampleSet],
                       rng: Optional[np.random.Generator] = None,
                       class_mask: Optional[np.ndarray] = None) -> SubnetworkMask:
    """
    Extract S_t: neuron selection from counters, then layer-wise weight pruning
    by the configured criterion among weights feeding retained neurons.
    """
    neurons = extract_neuron_mask(counters, config.kappa, config.mode, rng)
    scores = weight_scores(net, config, current, buffer, class_mask)
    mask = prune_weights(net.layout, neurons, scores, config.gamma)
    logger.debug(f"Extracted subnetwork with {config.criterion}: density {mask.density():.4f}, neurons {neurons.retained()}")
    return mask
