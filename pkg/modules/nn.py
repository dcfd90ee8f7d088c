"""
Parameter containers and transformer building blocks on top of modules.tensor.
"""

import hashlib
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from modules.tensor import (
    Tensor,
    ShapeError,
    columns,
    concat,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    softmax,
)


class Module:
    """
    Base class for anything that owns parameters.

    Parameters are Tensor attributes; child modules may be attributes or live
    in lists and dicts. Names follow attribute paths, e.g. `blocks.0.attn.q.weight`,
    in definition order.
    """

    def named_children(self) -> Iterator[Tuple[str, object]]:
        """Direct Tensor and Module attributes, list and dict members expanded; `_private` attributes skipped."""
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{key}", item

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        """Flat name -> Tensor map over the whole subtree."""
        params: Dict[str, Tensor] = {}
        for name, value in self.named_children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                params[full] = value
            else:
                params.update(value.parameters(prefix=f"{full}."))
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def set_requires_grad(self, flag: bool):
        for p in self.parameters().values():
            p.set_requires_grad(flag)

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True):
        """
        Copy arrays into the existing parameters in place. With `strict` the
        name sets must match exactly; shapes must always match.
        """
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"Несовпадение параметров: нет {missing[:5]}, лишние {unexpected[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"Параметр {name}: форма {value.shape} вместо {p.shape}")
            p.data[...] = value


def parameter_checksum(params: Mapping[str, Tensor]) -> str:
    """md5 over names and raw float64 bytes, in sorted name order."""
    digest = hashlib.md5()
    for name in sorted(params):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    """N(0, 1/fan_in) weights, shape (fan_in, fan_out)."""
    return Tensor(rng.normal(0.0, fan_in ** -0.5, size=(fan_in, fan_out)), requires_grad=True)


def causal_mask(length: int) -> np.ndarray:
    """True above the diagonal: position t may not look at positions > t."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class Linear(Module):
    """x @ W + b with W stored as (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = init_weight(rng, in_features, out_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self._eps)


class FeedForward(Module):
    """Two-layer GELU MLP, hidden width = round(width * mlp_ratio)."""

    def __init__(self, width: int, mlp_ratio: float, rng: np.random.Generator):
        hidden = max(1, int(round(width * mlp_ratio)))
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention; queries come from `x`, keys and values from
    `context` (self-attention when `context` is None). `mask` is True where
    attention is blocked.
    """

    def __init__(self, query_width: int, context_width: int, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ShapeError(f"Ширина {width} не делится на число голов {heads}")
        self.q = Linear(query_width, width, rng, bias=False)
        self.k = Linear(context_width, width, rng, bias=False)
        self.v = Linear(context_width, width, rng, bias=False)
        self.o = Linear(width, width, rng)
        self._heads = heads
        self._head_width = width // heads

    def __call__(self, x: Tensor, context: Optional[Tensor] = None, mask: Optional[np.ndarray] = None) -> Tensor:
        context = x if context is None else context
        q, k, v = self.q(x), self.k(context), self.v(context)
        scale = self._head_width ** -0.5
        heads = []
        # heads are column slices of the projected q, k, v
        for h in range(self._heads):
            lo, hi = h * self._head_width, (h + 1) * self._head_width
            scores = matmul(columns(q, lo, hi), columns(k, lo, hi).T) * scale
            if mask is not None:
                scores = masked_fill(scores, mask)
            heads.append(matmul(softmax(scores, axis=-1), columns(v, lo, hi)))
        merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
        return self.o(merged)


class TransformerBlock(Module):
    """Pre-norm residual block: self-attention then feed-forward."""

    def __init__(self, width: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.attn_norm = LayerNorm(width)
        self.attn = MultiHeadAttention(width, width, width, heads, rng)
        self.ff_norm = LayerNorm(width)
        self.ff = FeedForward(width, mlp_ratio, rng)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.attn_norm(x), mask=mask)
        return x + self.ff(self.ff_norm(x))
