"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every operation stores its parent tensors and a closure that maps the
upstream gradient to the gradients of the parents. `backward` orders the
reachable tensors into a ComputationRecord and replays those closures in
reverse. Gradients of intermediate tensors live only for the duration of one
`backward` call; leaf gradients accumulate in `Tensor.grad`.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class TensorValueError(ValueError):
    """A tensor would contain NaN or Inf."""


class LossError(ValueError):
    """The loss is undefined for the given targets."""


_grad_state = threading.local()

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["Tensor", np.ndarray, float, int]

MASK_VALUE = -1e9


def is_grad_enabled() -> bool:
    """Check whether operations on this thread are being recorded."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread only."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise TensorValueError(f"Нечисловые значения (NaN/Inf) в результате операции '{op}'")


class Tensor:
    """Row-major real array with an optional gradient accumulator."""

    def __init__(self, values, requires_grad: bool = False):
        data = np.array(values, dtype=np.float64)
        _check_finite(data, "tensor")
        self.data = data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(data) if requires_grad else None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        _check_finite(out.data, op)
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.grad = None
        out.op = op
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def set_requires_grad(self, flag: bool):
        self.requires_grad = flag
        if flag and self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() требует скаляр, получена форма {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other: Operand) -> "Tensor":
        return add(other, neg(self))

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: несовместимые формы {a.shape} и {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def neg(x: Tensor) -> Tensor:
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU (smooth, so finite differences stay clean)."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return Tensor._result(y, (x,), backward, "gelu")


def tensor_abs(x: Tensor) -> Tensor:
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where `mask` is True by a constant."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: маска {mask.shape} не совпадает с {x.shape}")
    return Tensor._result(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# ---------------------------------------------------------------- reductions

def tensor_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def tensor_mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: несовместимые формы {a.shape} и {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: ожидалась матрица, получена форма {x.shape}")
    return Tensor._result(x.data.T, (x,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------- layout

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: несовместимые формы {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(data, tensors, backward, "concat")


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows (embedding lookup, patch selection, reordering)."""
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return Tensor._result(x.data[idx], (x,), backward, "take_rows")


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice of a matrix; used to split attention heads."""
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"columns: срез [{start}:{stop}] вне формы {x.shape}")

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return Tensor._result(x.data[:, start:stop], (x,), backward, "columns")


# ---------------------------------------------------------------- normalisation

def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"Ось {axis} недопустима для формы {x.shape}")
    return axis % x.data.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._result(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    y = x.data - logsumexp(x.data, axis=axis, keepdims=True)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply gain and bias."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} не совпадают с шириной {width}")
    if eps <= 0:
        raise ValueError("layer_norm: eps должен быть положительным")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    y = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv_std / width * (
            width * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, width)
        return dx, (flat_g * xhat.reshape(-1, width)).sum(axis=0), flat_g.sum(axis=0)

    return Tensor._result(y, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_id: int = -100) -> Tensor:
    """Mean negative log-likelihood over the positions whose target is not `ignore_id`."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: логиты {logits.shape} и цели {targets.shape}")
    valid = targets != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise LossError("cross_entropy: все позиции проигнорированы, потеря не определена")
    vocab = logits.shape[1]
    picked = targets[valid]
    if picked.min() < 0 or picked.max() >= vocab:
        raise LossError(f"cross_entropy: цель вне словаря [0, {vocab})")
    logp = logits.data - logsumexp(logits.data, axis=1, keepdims=True)
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, picked].sum() / count

    def backward(g):
        grad = np.zeros_like(logits.data)
        grad[rows] = np.exp(logp[rows])
        grad[rows, picked] -= 1.0
        return (grad * (g / count),)

    return Tensor._result(np.array(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- autodiff

@dataclass
class ComputationRecord:
    """Tensors reachable from an output, in topological order (inputs first)."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationRecord":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    @property
    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if node.is_leaf]

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into the `grad` of every recording leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward требует скалярную потерю, получена форма {loss.shape}")
    if not loss.requires_grad:
        return
    record = ComputationRecord.trace(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def _probe_indices(grad: np.ndarray, max_entries: Optional[int]) -> np.ndarray:
    flat = np.abs(grad.reshape(-1))
    if max_entries is None or max_entries >= flat.size:
        return np.arange(flat.size)
    return np.sort(np.argsort(-flat, kind="stable")[:max_entries])


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
) -> float:
    """
    Compare autodiff gradients against central differences.

    Returns max |a - n| / max(|a|, |n|, 1e-8) over the probed entries. With
    `max_entries` only the entries with the largest analytic gradient of each
    parameter are probed.
    """
    named = dict(params) if isinstance(params, Mapping) else {str(i): p for i, p in enumerate(params)}
    for name, p in named.items():
        if not p.requires_grad:
            raise ValueError(f"Параметр {name} не отслеживает градиент")
        p.zero_grad()
    backward(f(params))

    worst = 0.0
    for p in named.values():
        analytic = p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        for idx in _probe_indices(analytic, max_entries):
            original = flat[idx]
            with no_grad():
                flat[idx] = original + eps
                up = f(params).item()
                flat[idx] = original - eps
                down = f(params).item()
            flat[idx] = original
            numeric = (up - down) / (2.0 * eps)
            a = analytic[idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst
