"""Small module system: parameter containers and the layers the model needs."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, as_tensor, concat, default_dtype, matmul, reshape, swapaxes


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.asarray(data, dtype=default_dtype()), requires_grad=True, name=name)


class Module:
    """Parameters and sub-modules are discovered from instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data) for k, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    """Lookup table whose row 0 is padding: zero at init and never updated."""

    def __init__(self, n_rows: int, d: int, rng: np.random.Generator, scale: float | None = None):
        w = rng.normal(0.0, scale if scale is not None else 1.0 / np.sqrt(d), size=(n_rows, d))
        w[0] = 0.0
        self.weight = Parameter(w)

    def __call__(self, index) -> Tensor:
        return F.embedding(self.weight, index, padding_idx=0)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, zero_init: bool = False):
        shape = (kernel, c_in, c_out)
        self.weight = Parameter(np.zeros(shape) if zero_init else _uniform(rng, shape, kernel * c_in))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride

    def __call__(self, x) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, stride=self.stride)


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng, bias=False)
        # no key bias: it shifts every score of a query equally, a softmax no-op
        self.q_bias = Parameter(np.zeros(d))
        self.v_bias = Parameter(np.zeros(d))
        self.proj = Linear(d, d, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        b, length, d = x.shape
        h, dh = self.heads, d // self.heads
        zero = np.zeros(d, dtype=x.dtype)
        qkv = self.qkv(x) + concat([self.q_bias, zero, self.v_bias], axis=0)
        qkv = reshape(qkv, (b, length, 3, h, dh))
        qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, B, H, L, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        bias = np.where(key_mask, 0.0, -1e9).astype(x.dtype)[:, None, None, :]
        att = F.softmax(scores + bias, axis=-1)
        ctx = matmul(att, v).transpose(0, 2, 1, 3)
        return self.proj(reshape(ctx, (b, length, d)))


class FeedForward(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x) -> Tensor:
        from .tensor import gelu

        return self.fc2(gelu(self.fc1(x)))


class TransformerEncoderLayer(Module):
    """Post-norm encoder block: attention and feed-forward, each with residual."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.attn = MultiHeadSelfAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, d, rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        y = self.norm1(x + self.attn(x, key_mask))
        return self.norm2(y + self.ff(y))


def sinusoidal_embedding(steps: np.ndarray, d: int, dtype=None) -> np.ndarray:
    """Standard transformer-style sin/cos features of integer steps, ``(B, d)``."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1)
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = steps[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if d % 2:
        emb = np.concatenate([emb, np.zeros((len(steps), 1))], axis=1)
    return emb.astype(dtype or default_dtype())


__all__ = [
    "Parameter", "Module", "Linear", "LayerNorm", "Embedding", "Conv1d",
    "MultiHeadSelfAttention", "FeedForward", "TransformerEncoderLayer",
    "sinusoidal_embedding", "as_tensor", "concat",
]
