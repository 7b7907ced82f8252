# core/model.py

"""
Core module for the working model.
A fully-connected ReLU feature extractor f_theta followed by a single-head
linear classifier g_theta over all classes. Parameters live in one flat
float64 vector (feature extractor first, head last) so that masks, snapshots,
the EMA mirror and the optimizer all share one indexing scheme.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ShapeError, UsageError
from .numeric import (
    DTYPE, GradientCheckReport, LinearTrace, MaskedAdam, ReluTrace, as_matrix,
    gradient_check, linear_forward, relu_backward, relu_forward, softmax_ce,
)

import logging
logger = logging.getLogger(__name__)

# --- Parameter layout ---

class ParamBlock(NamedTuple):
    """One tensor inside the flat parameter vector."""
    name: str
    start: int
    stop: int
    shape: Tuple[int, ...]

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)

class ParamLayout:
    """
    Stable indexing of all parameters.

    Order: layer0.weight, layer0.bias, layer1.weight, ..., head.weight, head.bias.
    Weights are stored (in, out) row-major, so column j of a weight block holds
    the incoming connections of output neuron j. f_theta is the prefix
    [0, n_feature).
    """

    def __init__(self, input_dim: int, hidden: Sequence[int], n_classes: int):
        if input_dim < 1 or n_classes < 1 or any(w < 1 for w in hidden):
            raise ShapeError(f"Invalid architecture: input {input_dim}, hidden {list(hidden)}, classes {n_classes}")
        self.input_dim = int(input_dim)
        self.hidden = [int(w) for w in hidden]
        self.n_classes = int(n_classes)
        self.blocks: List[ParamBlock] = []
        offset = 0
        fan_in = self.input_dim
        for l, width in enumerate(self.hidden):
            for name, shape in ((f"layer{l}.weight", (fan_in, width)), (f"layer{l}.bias", (width,))):
                size = int(np.prod(shape))
                self.blocks.append(ParamBlock(name, offset, offset + size, shape))
                offset += size
            fan_in = width
        self.n_feature = offset
        for name, shape in (("head.weight", (fan_in, self.n_classes)), ("head.bias", (self.n_classes,))):
            size = int(np.prod(shape))
            self.blocks.append(ParamBlock(name, offset, offset + size, shape))
            offset += size
        self.n_total = offset

    @property
    def n_hidden_layers(self) -> int:
        return len(self.hidden)

    @property
    def feature_slice(self) -> slice:
        return slice(0, self.n_feature)

    def weight_block(self, layer: int) -> ParamBlock:
        return self.blocks[2 * layer]

    def bias_block(self, layer: int) -> ParamBlock:
        return self.blocks[2 * layer + 1]

    @property
    def head_weight_block(self) -> ParamBlock:
        return self.blocks[-2]

    @property
    def head_bias_block(self) -> ParamBlock:
        return self.blocks[-1]

    def block_slices(self) -> Dict[str, slice]:
        return {b.name: b.slice for b in self.blocks}

    def full_mask(self, feature_mask: np.ndarray, head: bool = True) -> np.ndarray:
        """Extend an f_theta mask to the full vector with the head set to `head`."""
        feature_mask = np.asarray(feature_mask, dtype=bool)
        if feature_mask.shape != (self.n_feature,):
            raise ShapeError(f"feature mask shape {feature_mask.shape} != ({self.n_feature},)")
        out = np.empty(self.n_total, dtype=bool)
        out[:self.n_feature] = feature_mask
        out[self.n_feature:] = head
        return out

    def descriptor(self) -> Dict[str, Any]:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "n_classes": self.n_classes}

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ParamLayout) and self.descriptor() == other.descriptor()

    def __repr__(self) -> str:
        return f"ParamLayout({self.input_dim}, {self.hidden}, {self.n_classes})"

@dataclass(frozen=True)
class ParamVector:
    """A flat copy of every parameter plus the layout it indexes."""
    values: np.ndarray
    layout: ParamLayout

    def unflatten(self) -> Dict[str, np.ndarray]:
        return {b.name: self.values[b.slice].reshape(b.shape).copy() for b in self.layout.blocks}

    @classmethod
    def flatten(cls, tensors: Dict[str, np.ndarray], layout: ParamLayout) -> "ParamVector":
        values = np.empty(layout.n_total, dtype=DTYPE)
        for b in layout.blocks:
            arr = np.asarray(tensors[b.name], dtype=DTYPE)
            if arr.shape != b.shape:
                raise ShapeError(f"{b.name}: expected {b.shape}, got {arr.shape}")
            values[b.slice] = arr.reshape(-1)
        return cls(values, layout)

# --- Activation counters ---

class ActivationCounters:
    """One monotone counter per hidden neuron, reset explicitly per task."""

    def __init__(self, widths: Sequence[int]):
        self.counts: List[np.ndarray] = [np.zeros(int(w), dtype=np.int64) for w in widths]

    def reset(self) -> None:
        for c in self.counts:
            c[:] = 0

    def total(self) -> int:
        return int(sum(int(c.sum()) for c in self.counts))

    def copy(self) -> "ActivationCounters":
        out = ActivationCounters([c.shape[0] for c in self.counts])
        for dst, src in zip(out.counts, self.counts):
            dst[:] = src
        return out

def kwta_k(fraction: float, width: int) -> int:
    """Number of winners for a retention fraction: ceil(fraction * width), at least 1."""
    return max(1, min(width, math.ceil(fraction * width - 1e-9)))

def count_kwta_winners(activations: np.ndarray, k: int, counts: np.ndarray) -> None:
    """
    Increment counts for each sample's top-k positive activations.

    Ties are broken toward the lower neuron index; neurons that did not fire
    (activation 0) are never counted.
    """
    order = np.argsort(-activations, axis=1, kind="stable")[:, :k]
    winners = np.take_along_axis(activations, order, axis=1)
    fired = order[winners > 0.0]
    counts += np.bincount(fired, minlength=counts.shape[0]).astype(np.int64)

# --- Network ---

class ForwardTrace(NamedTuple):
    """Everything backward() needs from a forward pass."""
    version: int
    linear: List[LinearTrace]
    relu: List[ReluTrace]
    activations: List[np.ndarray]

class MLPNet:
    """
    Working model Phi_theta = g_theta(f_theta(.)).

    Args:
        input_dim: Feature width
        hidden: Hidden layer widths of f_theta
        n_classes: Total classes across all tasks (single head)
        rng: Generator for initialisation (He-normal weights, zero biases)
    """

    def __init__(self, input_dim: int, hidden: Sequence[int], n_classes: int,
                 rng: Optional[np.random.Generator] = None):
        self.layout = ParamLayout(input_dim, hidden, n_classes)
        self.flat = np.zeros(self.layout.n_total, dtype=DTYPE)
        self.version = 0
        if rng is not None:
            self._initialise(rng)

    def _initialise(self, rng: np.random.Generator) -> None:
        for l in range(self.layout.n_hidden_layers):
            block = self.layout.weight_block(l)
            fan_in = block.shape[0]
            self.flat[block.slice] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=block.stop - block.start)
        head = self.layout.head_weight_block
        self.flat[head.slice] = rng.normal(0.0, math.sqrt(1.0 / head.shape[0]), size=head.stop - head.start)
        self.touch()

    def touch(self) -> None:
        """Mark parameters as modified; traces from earlier forwards become stale."""
        self.version += 1

    def weight(self, layer: int) -> np.ndarray:
        b = self.layout.weight_block(layer)
        return self.flat[b.slice].reshape(b.shape)

    def bias(self, layer: int) -> np.ndarray:
        return self.flat[self.layout.bias_block(layer).slice]

    @property
    def head_weight(self) -> np.ndarray:
        b = self.layout.head_weight_block
        return self.flat[b.slice].reshape(b.shape)

    @property
    def head_bias(self) -> np.ndarray:
        return self.flat[self.layout.head_bias_block.slice]

    @property
    def n_classes(self) -> int:
        return self.layout.n_classes

    def clone(self) -> "MLPNet":
        other = MLPNet(self.layout.input_dim, self.layout.hidden, self.layout.n_classes)
        other.flat[:] = self.flat
        other.touch()
        return other

    def set_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=DTYPE)
        if values.shape != self.flat.shape:
            raise ShapeError(f"parameter vector shape {values.shape} != {self.flat.shape}")
        self.flat[:] = values
        self.touch()

    def update(self, optimizer: MaskedAdam, grads: np.ndarray, update_mask: Optional[np.ndarray] = None) -> None:
        """Apply one optimizer step in place."""
        optimizer.step(self.flat, grads, update_mask)
        self.touch()

def forward(net: MLPNet, batch: np.ndarray, kwta_fraction: Optional[float] = None,
            counters: Optional[ActivationCounters] = None) -> Tuple[np.ndarray, ForwardTrace]:
    """
    Forward pass returning logits over all classes.

    When both kwta_fraction and counters are given, each sample's top-k
    post-ReLU activations per hidden layer increment that layer's counters.
    Counting only observes; the returned logits are identical either way.

    Raises:
        ShapeError: if the feature width does not match the network input
    """
    x = as_matrix(batch)
    if x.shape[1] != net.layout.input_dim:
        raise ShapeError(f"batch width {x.shape[1]} != network input {net.layout.input_dim}")
    count = kwta_fraction is not None and counters is not None
    linear_traces: List[LinearTrace] = []
    relu_traces: List[ReluTrace] = []
    activations: List[np.ndarray] = []
    h = x
    for l in range(net.layout.n_hidden_layers):
        z, lt = linear_forward(h, net.weight(l), net.bias(l))
        h, rt = relu_forward(z)
        linear_traces.append(lt)
        relu_traces.append(rt)
        activations.append(h)
        if count:
            count_kwta_winners(h, kwta_k(kwta_fraction, h.shape[1]), counters.counts[l])
    logits, lt = linear_forward(h, net.head_weight, net.head_bias)
    linear_traces.append(lt)
    return logits, ForwardTrace(net.version, linear_traces, relu_traces, activations)

def _check_trace(net: MLPNet, trace: ForwardTrace, grad_logits: np.ndarray) -> np.ndarray:
    if trace.version != net.version:
        raise UsageError(f"Stale trace: recorded at version {trace.version}, network is at {net.version}")
    grad_logits = as_matrix(grad_logits)
    expected = (trace.linear[-1].x.shape[0], net.layout.n_classes)
    if grad_logits.shape != expected:
        raise ShapeError(f"grad_logits shape {grad_logits.shape} != {expected}")
    return grad_logits

def _backprop_deltas(net: MLPNet, trace: ForwardTrace, grad_logits: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Per-layer (layer input, output delta) pairs in forward order, head last."""
    pairs: List[Tuple[np.ndarray, np.ndarray]] = []
    delta = grad_logits
    pairs.append((trace.linear[-1].x, delta))
    weight = net.head_weight
    for l in reversed(range(net.layout.n_hidden_layers)):
        delta = relu_backward(trace.relu[l], delta @ weight.T)
        pairs.append((trace.linear[l].x, delta))
        weight = net.weight(l)
    pairs.reverse()
    return pairs

def backward(net: MLPNet, trace: ForwardTrace, grad_logits: np.ndarray) -> np.ndarray:
    """
    Exact gradient of the scalar loss that produced grad_logits.

    Batch reduction is a sum; softmax_ce already divides by the batch size, so
    the head-bias gradient is the column sum of grad_logits.

    Returns:
        Flat gradient vector aligned with net.flat
    Raises:
        UsageError: if the trace predates the latest parameter change
    """
    grad_logits = _check_trace(net, trace, grad_logits)
    grads = np.zeros_like(net.flat)
    n_layers = net.layout.n_hidden_layers
    for l, (x, delta) in enumerate(_backprop_deltas(net, trace, grad_logits)):
        if l < n_layers:
            w_block, b_block = net.layout.weight_block(l), net.layout.bias_block(l)
        else:
            w_block, b_block = net.layout.head_weight_block, net.layout.head_bias_block
        grads[w_block.slice] = (x.T @ delta).reshape(-1)
        grads[b_block.slice] = delta.sum(axis=0)
    return grads

def per_sample_squared_grads(net: MLPNet, trace: ForwardTrace, per_sample_grad_logits: np.ndarray) -> np.ndarray:
    """
    Sum over samples of the squared per-sample parameter gradients.

    Row i of per_sample_grad_logits must be the gradient of sample i's own
    loss (no batch averaging). Dividing the result by the sample count gives
    the empirical Fisher diagonal.
    """
    per_sample_grad_logits = _check_trace(net, trace, per_sample_grad_logits)
    out = np.zeros_like(net.flat)
    n_layers = net.layout.n_hidden_layers
    for l, (x, delta) in enumerate(_backprop_deltas(net, trace, per_sample_grad_logits)):
        if l < n_layers:
            w_block, b_block = net.layout.weight_block(l), net.layout.bias_block(l)
        else:
            w_block, b_block = net.layout.head_weight_block, net.layout.head_bias_block
        out[w_block.slice] = ((x * x).T @ (delta * delta)).reshape(-1)
        out[b_block.slice] = (delta * delta).sum(axis=0)
    return out

# --- Masks over classes ---

def task_logit_mask(classes: Sequence[int], n_classes: int) -> np.ndarray:
    """Boolean vector over all classes, True exactly on the given task's classes."""
    mask = np.zeros(n_classes, dtype=bool)
    mask[np.asarray(list(classes), dtype=np.int64)] = True
    return mask

# --- Snapshot / restore ---

def snapshot(net: MLPNet) -> ParamVector:
    """Bit-exact copy of every parameter."""
    return ParamVector(net.flat.copy(), net.layout)

def restore(net: MLPNet, saved: ParamVector, subset: Optional[np.ndarray] = None) -> None:
    """
    Write saved values back into net where subset is True (default: everywhere).

    Raises:
        ShapeError: if the layouts or the subset shape do not match
    """
    if saved.layout != net.layout or saved.values.shape != net.flat.shape:
        raise ShapeError(f"Cannot restore {saved.layout} into {net.layout}")
    if subset is None:
        net.flat[:] = saved.values
    else:
        subset = np.asarray(subset, dtype=bool)
        if subset.shape != net.flat.shape:
            raise ShapeError(f"restore subset shape {subset.shape} != {net.flat.shape}")
        if not subset.any():
            return
        np.copyto(net.flat, saved.values, where=subset)
    net.touch()

# --- Verification ---

def check_network_gradients(net: MLPNet, batch: np.ndarray, labels: np.ndarray,
                            class_mask: Optional[np.ndarray] = None,
                            consistency_target: Optional[np.ndarray] = None,
                            consistency_weight: float = 1.0,
                            h: float = 1e-5, tolerance: float = 1e-4) -> GradientCheckReport:
    """
    Finite-difference check of backward() for CE (optionally masked) plus an
    optional squared-error consistency term against fixed target logits.
    The network parameters are left as they were.
    """
    original = net.flat.copy()

    def loss_and_grad(values: np.ndarray) -> Tuple[float, np.ndarray]:
        net.set_params(values)
        logits, trace = forward(net, batch)
        loss, grad_logits = softmax_ce(logits, labels, class_mask)
        if consistency_target is not None:
            diff = logits - consistency_target
            loss += consistency_weight * float(np.mean(np.sum(diff * diff, axis=1)))
            grad_logits = grad_logits + consistency_weight * 2.0 * diff / diff.shape[0]
        return loss, backward(net, trace, grad_logits)

    try:
        return gradient_check(loss_and_grad, original, net.layout.block_slices(), h=h, tolerance=tolerance)
    finally:
        net.set_params(original)
