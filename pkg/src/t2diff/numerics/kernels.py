"""Hot inner loops, each with a numba ``@njit`` body and a pure-numpy twin.

The active implementation is picked once at import time.  Set
``T2DIFF_NO_NUMBA=1`` to force the numpy path (useful for debugging and for
the comparison benchmark in ``benchmarks/bench_kernels.py``).  Both variants
stay importable as ``<name>_numba`` / ``<name>_numpy`` so tests can check they
agree.
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - import guard
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = _HAVE_NUMBA and os.environ.get("T2DIFF_NO_NUMBA", "").strip() in ("", "0", "false")

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


# ---------------------------------------------------------------- scatter-add
def scatter_add_rows_numpy(index, values, n_rows):
    out = np.zeros((n_rows, values.shape[1]), dtype=values.dtype)
    np.add.at(out, index, values)
    return out


@njit(cache=True)
def scatter_add_rows_numba(index, values, n_rows):
    d = values.shape[1]
    out = np.zeros((n_rows, d), dtype=values.dtype)
    for i in range(index.shape[0]):
        r = index[i]
        for j in range(d):
            out[r, j] += values[i, j]
    return out


# ---------------------------------------------------------------- conv col2im
def col2im1d_numpy(gcols, padded_len, stride):
    """Fold window gradients ``(B, Lout, K, C)`` back onto ``(B, Lp, C)``."""
    b, lout, k, c = gcols.shape
    out = np.zeros((b, padded_len, c), dtype=gcols.dtype)
    pos = np.arange(lout) * stride
    for kk in range(k):
        # positions are distinct for a fixed tap, so fancy += is safe
        out[:, pos + kk, :] += gcols[:, :, kk, :]
    return out


@njit(cache=True)
def col2im1d_numba(gcols, padded_len, stride):
    b, lout, k, c = gcols.shape
    out = np.zeros((b, padded_len, c), dtype=gcols.dtype)
    for bi in range(b):
        for o in range(lout):
            base = o * stride
            for kk in range(k):
                for ci in range(c):
                    out[bi, base + kk, ci] += gcols[bi, o, kk, ci]
    return out


# ---------------------------------------------------------------- gelu (tanh form)
def gelu_forward_numpy(x):
    u = _GELU_C * (x + _GELU_K * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(u))).astype(x.dtype, copy=False)


def gelu_backward_numpy(x, g):
    u = _GELU_C * (x + _GELU_K * x * x * x)
    th = np.tanh(u)
    dudx = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
    return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dudx)).astype(x.dtype, copy=False)


# fast-math without nnan/ninf: exp may overflow to inf and the formulas rely on it
_FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}


@njit(cache=True, fastmath=_FAST)
def _gelu_fwd_flat(x, out, c, k):
    # 0.5 v (1 + tanh u) == v * sigmoid(2u); exp vectorizes far better than tanh
    one = x.dtype.type(1.0)
    two = x.dtype.type(2.0)
    for i in range(x.shape[0]):
        v = x[i]
        e = np.exp(two * c * (v + k * v * v * v))
        out[i] = v - v / (e + one)


@njit(cache=True, fastmath=_FAST)
def _gelu_bwd_flat(x, g, out, c, k):
    one = x.dtype.type(1.0)
    two = x.dtype.type(2.0)
    three = x.dtype.type(3.0)
    for i in range(x.shape[0]):
        v = x[i]
        e = np.exp(two * c * (v + k * v * v * v))
        q = one / (e + one)  # 1 - sigmoid(2u)
        dudx = c * (one + three * k * v * v)
        out[i] = g[i] * ((one - q) + two * v * (one - q) * q * dudx)


def gelu_forward_numba(x):
    xf = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(xf)
    _gelu_fwd_flat(xf, out, xf.dtype.type(_GELU_C), xf.dtype.type(_GELU_K))
    return out.reshape(x.shape)


def gelu_backward_numba(x, g):
    xf = np.ascontiguousarray(x).reshape(-1)
    gf = np.ascontiguousarray(g, dtype=x.dtype).reshape(-1)
    out = np.empty_like(xf)
    _gelu_bwd_flat(xf, gf, out, xf.dtype.type(_GELU_C), xf.dtype.type(_GELU_K))
    return out.reshape(x.shape)


# ---------------------------------------------------------------- softmax cross-entropy
def softmax_xent_numpy(logits, targets):
    """Row-wise ``-log softmax(logits)[target]`` and the softmax itself."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(logits.shape[0])
    loss = (np.log(s[:, 0]) + m[:, 0]) - logits[rows, targets]
    return loss, probs


@njit(cache=True, fastmath=_FAST)
def softmax_xent_numba(logits, targets):
    b, c = logits.shape
    loss = np.empty(b, dtype=logits.dtype)
    probs = np.empty_like(logits)
    for i in range(b):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        s = logits.dtype.type(0.0)
        for j in range(c):
            e = np.exp(logits[i, j] - m)
            probs[i, j] = e
            s += e
        for j in range(c):
            probs[i, j] /= s
        loss[i] = np.log(s) + m - logits[i, targets[i]]
    return loss, probs


# ---------------------------------------------------------------- ranking
def target_ranks_numpy(scores, targets, exclude=None):
    """1-based rank of ``targets`` per row; ties go to the lower column index.

    ``exclude`` (bool, same shape as ``scores``) removes candidates; the
    target column itself is never excluded.
    """
    rows = np.arange(scores.shape[0])
    ts = scores[rows, targets][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > ts) | ((scores == ts) & (cols < targets[:, None]))
    if exclude is not None:
        ahead &= ~exclude
    return ahead.sum(axis=1).astype(np.int64) + 1


@njit(cache=True)
def _ranks_nb(scores, targets, exclude, use_exclude):
    b, c = scores.shape
    out = np.empty(b, dtype=np.int64)
    for i in range(b):
        t = targets[i]
        ts = scores[i, t]
        r = 1
        for j in range(c):
            if use_exclude and exclude[i, j]:
                continue
            s = scores[i, j]
            if s > ts or (s == ts and j < t):
                r += 1
        out[i] = r
    return out


def target_ranks_numba(scores, targets, exclude=None):
    targets = np.asarray(targets, dtype=np.int64)
    if exclude is None:
        return _ranks_nb(scores, targets, np.zeros((1, 1), dtype=np.bool_), False)
    return _ranks_nb(scores, targets, exclude, True)


if USE_NUMBA:
    scatter_add_rows = scatter_add_rows_numba
    col2im1d = col2im1d_numba
    gelu_forward = gelu_forward_numba
    gelu_backward = gelu_backward_numba
    # without SVML numba's scalar exp loses to numpy's vectorized one (see the benchmark)
    softmax_xent = softmax_xent_numpy
    target_ranks = target_ranks_numba
else:
    scatter_add_rows = scatter_add_rows_numpy
    col2im1d = col2im1d_numpy
    gelu_forward = gelu_forward_numpy
    gelu_backward = gelu_backward_numpy
    softmax_xent = softmax_xent_numpy
    target_ranks = target_ranks_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
NUMPY_ONLY = ("softmax_xent",)
