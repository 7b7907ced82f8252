# core/numeric.py

"""
Core numeric module.
Dense linear algebra, layer primitives with hand-written backward rules,
masked softmax cross-entropy, a masked Adam optimizer and a finite-difference
gradient checker. Everything runs in float64 on numpy arrays.
"""

import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from .exceptions import InputError, NumericError, ShapeError

import logging
logger = logging.getLogger(__name__)

DTYPE = np.float64

# --- Random number generation ---

def make_rng(seed: int) -> np.random.Generator:
    """Create a PCG64 generator; identical seeds give identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))

def _label_to_int(label: Union[int, str]) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    return int(label) & 0xFFFFFFFF

def derive_rng(seed: int, *labels: Union[int, str]) -> np.random.Generator:
    """
    Derive an independent generator for one purpose of a run.

    Args:
        seed: Run seed
        *labels: Purpose labels (strings or ints), e.g. ("minibatch", task_id, epoch)
    Returns:
        Generator whose stream depends only on (seed, labels)
    """
    spawn_key = tuple(_label_to_int(label) for label in labels)
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(seq))

# --- Linear algebra ---

def as_matrix(x: np.ndarray) -> np.ndarray:
    """Return x as a 2-D float64 array (1-D input becomes a single row)."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"Expected a matrix, got array with shape {arr.shape}")
    return arr

def _check_finite(arr: np.ndarray, op_name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op_name} produced non-finite values")

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Standard matrix product with shape validation.

    Raises:
        ShapeError: if a.cols != b.rows
        NumericError: if the product is not finite
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    _check_finite(out, "matmul")
    return out

# --- Layer primitives ---

class ReluTrace(NamedTuple):
    """Activation pattern recorded by relu_forward (True where x > 0)."""
    active: np.ndarray

def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, ReluTrace]:
    """Elementwise max(x, 0); the sub-gradient at exactly 0 is 0."""
    x = np.asarray(x, dtype=DTYPE)
    active = x > 0.0
    return np.where(active, x, 0.0), ReluTrace(active)

def relu_backward(trace: ReluTrace, grad_y: np.ndarray) -> np.ndarray:
    return np.where(trace.active, grad_y, 0.0)

class LinearTrace(NamedTuple):
    """Input kept by linear_forward for the backward pass."""
    x: np.ndarray

def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, LinearTrace]:
    """
    Affine map y = x @ W + b.

    Args:
        x: Input batch (batch, in)
        weight: Weight matrix (in, out)
        bias: Bias vector (out,)
    Returns:
        (y, trace)
    """
    x = as_matrix(x)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    y = matmul(x, weight) + bias
    return y, LinearTrace(x)

def linear_backward(trace: LinearTrace, weight: np.ndarray, grad_y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Backward rule for linear_forward.

    Returns:
        (grad_x, grad_weight, grad_bias); batch reduction is a sum, so a
        mean-reduced loss must already be reflected in grad_y.
    """
    grad_w = trace.x.T @ grad_y
    grad_b = grad_y.sum(axis=0)
    grad_x = grad_y @ weight.T
    return grad_x, grad_w, grad_b

# --- Softmax cross-entropy ---

def _validate_ce_inputs(logits: np.ndarray, labels: np.ndarray, class_mask: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_rows, n_classes = logits.shape
    if labels.shape[0] != n_rows:
        raise ShapeError(f"Expected one label per row: {labels.shape[0]} labels for {n_rows} rows")
    if n_rows and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"Label outside class range [0, {n_classes})")
    if class_mask is None:
        allowed = np.ones(n_classes, dtype=bool)
    else:
        allowed = np.asarray(class_mask, dtype=bool).reshape(-1)
        if allowed.shape[0] != n_classes:
            raise ShapeError(f"class mask length {allowed.shape[0]} != {n_classes} classes")
        if n_rows and not np.all(allowed[labels]):
            raise InputError("A label's own class is masked out")
    return logits, labels, allowed

def softmax_probs(logits: np.ndarray, class_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise softmax restricted to unmasked classes (masked classes get probability 0)."""
    logits = as_matrix(logits)
    allowed = np.ones(logits.shape[1], dtype=bool) if class_mask is None else np.asarray(class_mask, dtype=bool)
    z_max = np.max(np.where(allowed, logits, -np.inf), axis=1, keepdims=True)
    shifted = np.where(allowed, logits - z_max, 0.0)
    exp = np.where(allowed, np.exp(shifted), 0.0)
    return exp / exp.sum(axis=1, keepdims=True)

def per_sample_ce(logits: np.ndarray, labels: np.ndarray, class_mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-row cross-entropy with masked classes excluded from the log-sum-exp.

    Returns:
        (losses of shape (rows,), probabilities of shape (rows, classes))
    """
    logits, labels, allowed = _validate_ce_inputs(logits, labels, class_mask)
    if logits.shape[0] == 0:
        return np.zeros(0, dtype=DTYPE), np.zeros_like(logits)
    z_max = np.max(np.where(allowed, logits, -np.inf), axis=1, keepdims=True)
    shifted = np.where(allowed, logits - z_max, 0.0)
    exp = np.where(allowed, np.exp(shifted), 0.0)
    denom = exp.sum(axis=1, keepdims=True)
    rows = np.arange(logits.shape[0])
    losses = np.log(denom[:, 0]) - shifted[rows, labels]
    return losses, exp / denom

def softmax_ce(logits: np.ndarray, labels: np.ndarray, class_mask: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """
    Mean softmax cross-entropy and its gradient with respect to the logits.

    Args:
        logits: (rows, classes)
        labels: one class id per row
        class_mask: optional boolean vector; False classes are excluded from the
            softmax and receive exactly zero gradient
    Returns:
        (loss, grad_logits)
    Raises:
        InputError: label outside class range, or a label whose class is masked
    """
    losses, probs = per_sample_ce(logits, labels, class_mask)
    n_rows = losses.shape[0]
    if n_rows == 0:
        raise InputError("softmax_ce requires at least one row")
    grad = probs.copy()
    grad[np.arange(n_rows), np.asarray(labels, dtype=np.int64).reshape(-1)] -= 1.0
    grad /= n_rows
    loss = float(losses.mean())
    _check_finite(grad, "softmax_ce")
    return loss, grad

# --- Adam ---

@dataclass
class AdamState:
    """Moment accumulators shaped like the flat parameter vector."""
    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray  # per-element update count, drives bias correction
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0  # number of adam_step calls that touched anything

    @classmethod
    def fresh(cls, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(size, dtype=DTYPE), v=np.zeros(size, dtype=DTYPE),
                   steps=np.zeros(size, dtype=np.int64), beta1=beta1, beta2=beta2, eps=eps)

def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              update_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Bias-corrected Adam update applied in place where update_mask is True.

    Parameters and their moments outside the mask are left untouched, so an
    all-False mask is a bitwise no-op.

    Args:
        params: Flat parameter vector (modified in place)
        grads: Gradient, same shape as params
        state: AdamState for params
        lr: Learning rate
        update_mask: Optional boolean vector; None updates everything
    Returns:
        params
    """
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ShapeError(f"adam_step shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if update_mask is None:
        sel = np.arange(params.shape[0])
    else:
        update_mask = np.asarray(update_mask, dtype=bool)
        if update_mask.shape != params.shape:
            raise ShapeError(f"update mask shape {update_mask.shape} != params {params.shape}")
        sel = np.flatnonzero(update_mask)
    if sel.size == 0:
        return params

    g = grads[sel]
    t = state.steps[sel] + 1
    m = state.beta1 * state.m[sel] + (1.0 - state.beta1) * g
    v = state.beta2 * state.v[sel] + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    updated = params[sel] - lr * (m_hat / (np.sqrt(v_hat) + state.eps))
    _check_finite(updated, "adam_step")

    params[sel] = updated
    state.m[sel] = m
    state.v[sel] = v
    state.steps[sel] = t
    state.step_count += 1
    return params

class MaskedAdam:
    """
    Adam bound to one training phase.

    Every call to step() is appended to the shared log as (phase, lr) so
    callers can check which rate each phase actually used.
    """

    def __init__(self, size: int, lr: float, phase: str, log: Optional[List[Tuple[str, float]]] = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.phase = phase
        self.state = AdamState.fresh(size, beta1, beta2, eps)
        self.log = log if log is not None else []

    def step(self, params: np.ndarray, grads: np.ndarray, update_mask: Optional[np.ndarray] = None) -> None:
        adam_step(params, grads, self.state, self.lr, update_mask)
        self.log.append((self.phase, self.lr))

# --- Gradient checking ---

@dataclass
class GradientCheckReport:
    """Max relative error between analytic and central-difference gradients per block."""
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

def gradient_check(loss_and_grad: Callable[[np.ndarray], Tuple[float, np.ndarray]],
                   params: np.ndarray,
                   blocks: Optional[Dict[str, slice]] = None,
                   h: float = 1e-5,
                   tolerance: float = 1e-4,
                   floor: float = 1e-6) -> GradientCheckReport:
    """
    Compare an analytic gradient against central finite differences.

    Args:
        loss_and_grad: Function mapping a flat parameter vector to (loss, grad)
        params: Point at which to check (not modified)
        blocks: Optional name -> slice partition of params for per-block reporting
        h: Finite-difference step
        tolerance: Pass threshold on the max relative error
        floor: Lower bound on the relative-error denominator
    Returns:
        GradientCheckReport
    """
    base = np.array(params, dtype=DTYPE, copy=True)
    _, analytic = loss_and_grad(base.copy())
    analytic = np.asarray(analytic, dtype=DTYPE)
    if analytic.shape != base.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != params {base.shape}")
    if blocks is None:
        blocks = {"params": slice(0, base.shape[0])}

    numeric = np.zeros_like(base)
    shifted = base.copy()
    for i in range(base.shape[0]):
        shifted[i] = base[i] + h
        loss_plus, _ = loss_and_grad(shifted.copy())
        shifted[i] = base[i] - h
        loss_minus, _ = loss_and_grad(shifted.copy())
        shifted[i] = base[i]
        numeric[i] = (loss_plus - loss_minus) / (2.0 * h)

    report = GradientCheckReport(tolerance=tolerance)
    for name, sl in blocks.items():
        a = analytic[sl]
        n = numeric[sl]
        if a.size == 0:
            report.errors[name] = 0.0
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        report.errors[name] = float(np.max(np.abs(a - n) / denom))
    logger.debug(f"Gradient check: max error {report.max_error:.3e} over {len(blocks)} blocks")
    return report
