"""Layer-level differentiable ops built directly on numpy (and the kernels)."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, as_tensor, make, unbroadcast


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make("softmax", y, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs feature dim {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return make("layer_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def embedding(table, index, padding_idx: int | None = 0) -> Tensor:
    """Row lookup; the padding row never receives gradient."""
    table = as_tensor(table)
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise ShapeError(f"embedding_lookup: integer indices required, got {index.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for {table.shape[0]} rows")
    out = table.data[index]

    def bw(g):
        flat = np.ascontiguousarray(index.reshape(-1).astype(np.int64))
        gt = kernels.scatter_add_rows(flat, np.ascontiguousarray(g.reshape(-1, table.shape[1])), table.shape[0])
        if padding_idx is not None:
            gt[padding_idx] = 0
        return (gt,)

    return make("embedding_lookup", out, (table,), bw)


def conv1d(x, weight, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Channels-last 1-D convolution.

    ``x`` is ``(B, L, C_in)``, ``weight`` is ``(K, C_in, C_out)``.  Default
    padding is ``K // 2`` on both sides, which keeps the length at stride 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {weight.shape}")
    k, cin, cout = weight.shape
    pad = k // 2 if padding is None else padding
    b, length, _ = x.shape
    lp = length + 2 * pad
    lout = (lp - k) // stride + 1
    if lout < 1:
        raise ShapeError(f"conv1d: sequence of length {length} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0))) if pad else x.data
    taps = np.arange(lout)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[:, taps, :].reshape(b * lout, k * cin)
    w2 = weight.data.reshape(k * cin, cout)
    out = (cols @ w2).reshape(b, lout, cout)
    parents: tuple = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        g2 = g.reshape(b * lout, cout)
        gx = gw = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(b, lout, k, cin)
            gxp = kernels.col2im1d(np.ascontiguousarray(gcols), lp, stride)
            gx = gxp[:, pad : pad + length, :] if pad else gxp
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(k, cin, cout)
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make("conv1d", out, parents, bw)


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0
        m[o, i0] += 1.0 - w1
        m[o, i1] += w1
    m.setflags(write=False)
    return m.astype(dtype_str)


def upsample_linear(x, out_len: int) -> Tensor:
    """Linear interpolation along the length axis of ``(B, L, C)``."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample_linear: expected (B, L, C), got {x.shape}")
    m = _interp_matrix(x.shape[1], out_len, x.dtype.str)
    out = np.matmul(m, x.data)
    return make("upsample_linear", out, (x,), lambda g: (np.matmul(m.T, g),))


def cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]`` with max-subtraction."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: target index outside the candidate scope")
    loss, probs = kernels.softmax_xent(np.ascontiguousarray(logits.data), targets)
    rows = logits.shape[0]
    out = np.asarray(loss.mean(), dtype=logits.dtype)

    def bw(g):
        grad = probs.copy()
        grad[np.arange(rows), targets] -= 1.0
        return (grad * (g / rows),)

    return make("cross_entropy", out, (logits,), bw)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b`` (mask is a plain boolean array)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def bw(g):
        return unbroadcast(np.where(mask, g, 0), a.shape), unbroadcast(np.where(mask, 0, g), b.shape)

    return make("where", out, (a, b), bw)
