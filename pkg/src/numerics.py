#!/usr/bin/env python3
"""
Numerics Module for Harborsight
Dense tensors with tape-based reverse-mode differentiation.

Only the operations the fusion model, the losses and the optimizer need are
provided. Every op checks its output for NaN/Inf and raises immediately instead
of letting non-finite values propagate into masks or losses.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


class NumericsError(Exception):
    """Base exception for tensor arithmetic errors"""
    pass


class ShapeError(NumericsError):
    """Exception for incompatible operand shapes"""
    pass


class NonFiniteError(NumericsError):
    """Exception raised when an op produces NaN or Inf"""
    pass


class TapeError(NumericsError):
    """Exception for invalid use of the computation tape"""
    pass


ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()
_DEFAULT_DTYPE = [np.float64]


def set_default_dtype(dtype) -> None:
    """
    Select the floating point type used for new tensors

    Args:
        dtype: np.float64 (default) or np.float32
    """
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise NumericsError(f"Unsupported dtype → {dtype}")
    _DEFAULT_DTYPE[0] = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


class Tensor:
    """
    Dense n-dimensional value array with optional gradient tracking.

    Values are never mutated by ops; only ``grad`` accumulates and the optimizer
    swaps ``data`` for a new array after each step.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["ComputationTape"] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = data
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        tensor._tape = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class TapeEntry:
    """One recorded operation: inputs, output and its backward rule"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputationTape:
    """
    Ordered record of differentiable operations.

    Used as a context manager it becomes the active tape of the current thread;
    ops executed inside the block are appended to it. Replaying the entries in
    reverse order yields gradients for every requires_grad leaf reachable from
    the loss.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "ComputationTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("Tape stack corrupted: exiting a tape that is not active")
        stack.pop()

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor,
               backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward))
        output._tape = self

    def reset(self) -> None:
        self.entries = []

    def backward(self, loss: Tensor) -> None:
        """
        Populate ``grad`` of every requires_grad leaf reachable from ``loss``

        Args:
            loss: Scalar tensor recorded on this tape

        Raises:
            TapeError: If loss is not scalar or was recorded on another tape
        """
        if loss.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        if loss.is_leaf:
            if loss.requires_grad:
                _accumulate_leaf(loss, seed)
            return
        if loss._tape is not self:
            raise TapeError("Loss was recorded on a different tape")

        pending: Dict[int, np.ndarray] = {id(loss): seed}
        for entry in reversed(self.entries):
            upstream = pending.pop(id(entry.output), None)
            if upstream is None:
                continue
            input_grads = entry.backward(upstream)
            for tensor, grad in zip(entry.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if not np.all(np.isfinite(grad)):
                    raise NonFiniteError(f"Non-finite gradient flowing out of {entry.op}")
                if tensor.is_leaf:
                    _accumulate_leaf(tensor, grad)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + grad
                else:
                    pending[id(tensor)] = grad


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=tensor.data.dtype).reshape(tensor.data.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def _tape_stack() -> List[ComputationTape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape() -> Optional[ComputationTape]:
    """Active tape of this thread, or None outside every ``with ComputationTape()`` block"""
    stack = _tape_stack()
    return stack[-1] if stack else None


def grad_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for inference paths"""
    previous = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = previous


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss; repeated calls accumulate"""
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape if loss._tape is not None else current_tape()
    if tape is None:
        # untracked leaf
        tape = ComputationTape()
    tape.backward(loss)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...],
          backward_rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite values produced by {op}")
    tape = current_tape()
    requires = tape is not None and grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        tape.record(op, inputs, out, backward_rule)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch → {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of (m×k) and (k×n)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch → {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def rule(g):
        return g @ b_data.T, a_data.T @ g

    return _emit("matmul", a_data @ b_data, (a, b), rule)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", np.transpose(x.data, axes).copy(), (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape mismatch → {original} to {tuple(shape)}: {e}")

    def rule(g):
        return (g.reshape(original),)

    return _emit("reshape", data, (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis (other extents must agree)"""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat shape mismatch → {tensors[0].shape} vs {t.shape}")
    if axis not in (-1, tensors[0].ndim - 1):
        raise ShapeError("concat only supports the last axis")
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum(widths)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=-1))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), rule)


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of a 2D tensor; gradient scatters back to the selected rows"""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take_rows", x.data[idx], (x,), rule)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _emit("mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    a_data, b_data = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a_data / b_data

    def rule(g):
        return g / b_data, -g * a_data / (b_data * b_data)

    return _emit("div", out, (a, b), rule)


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector of length n to every row of a (..., n) tensor"""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_row shape mismatch → {x.shape} + {bias.shape}")
    width = bias.shape[0]
    return _emit("add_row", x.data + bias.data, (x, bias),
                 lambda g: (g, g.reshape(-1, width).sum(axis=0)))


def mul_row(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply every row of a (..., n) tensor by a vector of length n"""
    x, weights = as_tensor(x), as_tensor(weights)
    if weights.ndim != 1 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"mul_row shape mismatch → {x.shape} * {weights.shape}")
    x_data, w_data = x.data, weights.data
    width = w_data.shape[0]
    return _emit("mul_row", x_data * w_data, (x, weights),
                 lambda g: (g * w_data, (g * x_data).reshape(-1, width).sum(axis=0)))


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _emit("scale", x.data * factor, (x,), lambda g: (g * factor,))


def shift(x: Tensor, offset: float) -> Tensor:
    x = as_tensor(x)
    return _emit("shift", x.data + float(offset), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    return _emit("relu", np.where(positive, x.data, 0.0).astype(x.data.dtype), (x,),
                 lambda g: (g * positive,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    x_data = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x_data)
    return _emit("log", out, (x,), lambda g: (g / x_data,))


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise x**exponent for non-negative x"""
    x = as_tensor(x)
    exponent = float(exponent)
    x_data = x.data
    out = np.power(x_data, exponent)

    def rule(g):
        if exponent == 0.0:
            return (np.zeros_like(g),)
        return (g * exponent * np.power(x_data, exponent - 1.0),)

    return _emit("power", out, (x,), rule)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient flows only where x is above the floor"""
    x = as_tensor(x)
    above = x.data > floor
    return _emit("clamp_min", np.where(above, x.data, floor).astype(x.data.dtype), (x,),
                 lambda g: (g * above,))


def clamp01(x: Union[Tensor, np.ndarray]) -> Tensor:
    """Restrict values to [0, 1]. Not differentiated: used on mask paths only."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=get_default_dtype())
    return Tensor._wrap(np.clip(data, 0.0, 1.0), False)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_rows(x: Tensor) -> Tensor:
    """Sum a 2D tensor over its rows, giving one value per column"""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"sum_rows needs a 2D tensor, got {x.shape}")
    rows = x.shape[0]
    return _emit("sum_rows", x.data.sum(axis=0), (x,),
                 lambda g: (np.repeat(g[None, :], rows, axis=0),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    count = max(x.size, 1)
    return scale(sum_all(x), 1.0 / count)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction"""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", out, (x,), rule)


# ---------------------------------------------------------------- spatial

def interpolation_matrix(size_in: int, size_out: int) -> np.ndarray:
    """
    Linear interpolation weights with half-pixel centres (rows sum to 1)

    Returns:
        (size_out × size_in) matrix R so that resized = R @ signal
    """
    weights = np.zeros((size_out, size_in), dtype=np.float64)
    if size_in == 1:
        weights[:, 0] = 1.0
        return weights
    ratio = size_in / size_out
    for i in range(size_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), size_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, size_in - 1)
        frac = src - lo
        weights[i, lo] += 1.0 - frac
        weights[i, hi] += frac
    return weights


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an (H, W, C) feature map"""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"resize_bilinear needs (H, W, C), got {x.shape}")
    h, w, _ = x.shape
    if (h, w) == (out_h, out_w):
        return x
    rh = interpolation_matrix(h, out_h).astype(x.data.dtype)
    rw = interpolation_matrix(w, out_w).astype(x.data.dtype)
    out = np.einsum("ih,hwc,jw->ijc", rh, x.data, rw, optimize=True)

    def rule(g):
        return (np.einsum("ih,ijc,jw->hwc", rh, g, rw, optimize=True),)

    return _emit("resize_bilinear", out, (x,), rule)


def space_to_depth(x: Tensor, block: int = 2) -> Tensor:
    """(H, W, C) → (H/b, W/b, b·b·C); a stride-b patch gather for strided convolution"""
    x = as_tensor(x)
    h, w, c = x.shape
    if h % block or w % block:
        raise ShapeError(f"space_to_depth needs extents divisible by {block}, got {x.shape}")
    blocks = reshape(x, (h // block, block, w // block, block, c))
    blocks = transpose(blocks, (0, 2, 1, 3, 4))
    return reshape(blocks, (h // block, w // block, block * block * c))


# ---------------------------------------------------------------- initialization

def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator,
                   name: Optional[str] = None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------- gradient checking

def finite_difference_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """
    Central finite-difference estimate of d fn() / d param

    Args:
        fn: Closure recomputing the scalar loss from current parameter values
        param: Tensor whose entries are perturbed in place and restored
        h: Step size

    Returns:
        Array shaped like param.data
    """
    param.data = np.ascontiguousarray(param.data)
    estimate = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            estimate.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return estimate


def gradient_relative_error(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between analytic and finite-difference gradients"""
    for p in params:
        p.zero_grad()
    with ComputationTape() as tape:
        loss = fn()
        tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_difference_gradient(fn, p, h)
        scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale_))
    return worst


# ---------------------------------------------------------------- optimization

def linear_decay(step: int, total_steps: int, lr_initial: float, lr_final: float) -> float:
    """Learning rate decayed linearly from lr_initial (step 0) to lr_final (last step)"""
    if total_steps <= 1:
        return lr_initial
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_initial + (lr_final - lr_initial) * frac


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay"""

    def __init__(self, params: Dict[str, Tensor], lr: float = 5e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            data = p.data
            if self.weight_decay:
                data = data - lr * self.weight_decay * data
            p.data = data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
