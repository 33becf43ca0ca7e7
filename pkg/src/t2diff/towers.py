"""Item and user towers, mixed attention and the composite loss.

The item tower is the embedding table itself.  The user tower encodes the
current session (optionally followed by the diffusion-predicted next
behavior) with a transformer, uses the pooled result to attend over the
longer history through activation units, and fuses both views with a small
feed-forward net.  Scoring is a plain inner product between the two towers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import functional as F
from .numerics import nn
from .numerics.tensor import (
    Tensor, as_tensor, broadcast_to, concat, log, log_softplus, matmul, softplus, tsum,
)

# lag upper edges in seconds: 0 | <1m | <10m | <1h | <1d | <1w | <30d | >=30d
LAG_EDGES = np.array([1, 60, 600, 3600, 86400, 604800, 2592000], dtype=np.int64)
N_LAG_BUCKETS = len(LAG_EDGES) + 1


def lag_buckets(lags) -> np.ndarray:
    lags = np.maximum(np.asarray(lags, dtype=np.int64), 0)
    return np.searchsorted(LAG_EDGES, lags, side="right")


class SessionEncoder(nn.Module):
    """Transformer over ``[session..., x_hat]`` followed by masked mean pooling."""

    def __init__(self, d: int, k_max: int, rng: np.random.Generator, heads: int = 2, layers: int = 1):
        self.k_max = k_max
        self.pos = nn.Parameter(rng.normal(0.0, 0.02, size=(k_max + 1, d)))
        self.layers = [nn.TransformerEncoderLayer(d, heads, 4 * d, rng) for _ in range(layers)]

    def __call__(self, X_session, session_mask: np.ndarray, x_hat=None) -> Tensor:
        X_session = as_tensor(X_session)
        b, k, d = X_session.shape
        if k > self.k_max:
            raise ValueError(f"session window {k} exceeds k_max={self.k_max}")
        mask = np.asarray(session_mask, dtype=bool)
        tokens = X_session
        if x_hat is not None:
            tokens = concat([tokens, as_tensor(x_hat).reshape(b, 1, d)], axis=1)
            mask = np.concatenate([mask, np.ones((b, 1), dtype=bool)], axis=1)
        if not mask.any(axis=1).all():
            raise ValueError("session_encode: a row has no valid positions")
        length = tokens.shape[1]
        h = tokens + self.pos[self.k_max + 1 - length :]
        for layer in self.layers:
            h = layer(h, mask)
        w = (mask / mask.sum(axis=1, keepdims=True)).astype(h.dtype)[..., None]
        return tsum(h * w, axis=1)


class ActivationUnit(nn.Module):
    """Scores a history item against the current interest; output is positive."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None):
        self.ff = nn.FeedForward(4 * d, hidden or 2 * d, 1, rng)

    def __call__(self, x: Tensor, h_s: Tensor) -> Tensor:
        return softplus(self._raw(x, h_s))

    def log_scores(self, x: Tensor, h_s: Tensor) -> Tensor:
        """``log`` of the scores, finite even where the scores underflow."""
        return log_softplus(self._raw(x, h_s))

    def _raw(self, x: Tensor, h_s: Tensor) -> Tensor:
        b, n, d = x.shape
        hs = broadcast_to(h_s.reshape(b, 1, d), (b, n, d))
        feats = concat([x, x - hs, x * hs, hs], axis=-1)
        return self.ff(feats)[..., 0]


def target_attention(unit, X_hist, hist_mask: np.ndarray, h_s) -> tuple[Tensor, Tensor]:
    """Weighted history ``h_l = sum_j a_j x_j`` with ``a_j = s_j / sum_i s_i``.

    The ratio is evaluated as a softmax over ``log s_j``: the same weights,
    but nothing underflows when every score of a row is tiny.  Rows without
    any valid history give ``h_l = 0``.  Returns ``(h_l, a)``.
    """
    X_hist, h_s = as_tensor(X_hist), as_tensor(h_s)
    m = np.asarray(hist_mask, dtype=bool)
    if X_hist.shape[1] == 0:
        zero = Tensor(np.zeros((X_hist.shape[0], X_hist.shape[2]), dtype=X_hist.dtype))
        return zero, Tensor(np.zeros((X_hist.shape[0], 0), dtype=X_hist.dtype))
    if hasattr(unit, "log_scores"):
        log_s = unit.log_scores(X_hist, h_s)
    else:
        log_s = log(F.where(m, unit(X_hist, h_s), np.ones(m.shape, X_hist.dtype)))
    logits = F.where(m, log_s, np.full(m.shape, -1e30, X_hist.dtype))
    a = F.softmax(logits, axis=1) * m.any(axis=1, keepdims=True).astype(X_hist.dtype)
    h_l = tsum(X_hist * a.reshape(a.shape[0], a.shape[1], 1), axis=1)
    return h_l, a


class OutputNet(nn.Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.ff = nn.FeedForward(2 * d, 2 * d, d, rng)

    def __call__(self, h_l, h_s) -> Tensor:
        return self.ff(concat([as_tensor(h_l), as_tensor(h_s)], axis=-1))


def user_embed(net, h_l, h_s) -> Tensor:
    return net(h_l, h_s)


class UserTower(nn.Module):
    def __init__(self, d: int, k_max: int, rng: np.random.Generator, heads: int = 2, layers: int = 1):
        self.session = SessionEncoder(d, k_max, rng, heads=heads, layers=layers)
        self.unit = ActivationUnit(d, rng)
        self.lag = nn.Embedding(N_LAG_BUCKETS, d, rng, scale=0.02)
        self.out = OutputNet(d, rng)
        # the padding convention of nn.Embedding zeroes row 0; bucket 0 is a real lag here
        self.lag.weight.data[0] = rng.normal(0.0, 0.02, size=d)

    def __call__(self, X_seq, mask: np.ndarray, k: np.ndarray, lag_bucket: np.ndarray, x_hat=None):
        """``X_seq`` is the left-padded ``(B, n, d)`` sequence; session is the last ``k`` rows."""
        X_seq = as_tensor(X_seq)
        b, n, d = X_seq.shape
        kw = min(self.session.k_max, n)
        pos = np.arange(n)[None, :]
        k = np.asarray(k)[:, None]
        session_mask = mask & (pos >= n - k)
        hist_mask = mask & (pos < n - k)
        h_s = self.session(X_seq[:, n - kw :, :], session_mask[:, n - kw :], x_hat)
        lag = F.embedding(self.lag.weight, lag_bucket, padding_idx=None)
        h_l, _ = target_attention(self.unit, X_seq + lag, hist_mask, h_s)
        return self.out(h_l, h_s)


def tower_loss(e_u, table, targets, negatives: np.ndarray | None = None) -> Tensor:
    """Softmax loss of the target against the candidate scope.

    ``table`` is the full embedding table (row 0 = padding, never a
    candidate).  With ``negatives=None`` the scope is every item; otherwise
    it is the target plus the given shared negative ids.
    """
    e_u = as_tensor(e_u)
    targets = np.asarray(targets, dtype=np.int64)
    if negatives is None:
        if targets.min() < 1 or targets.max() >= table.shape[0]:
            raise ValueError("tower_loss: target outside the item vocabulary")
        logits = matmul(e_u, table[1:].transpose())
        return F.cross_entropy(logits, targets - 1)
    negatives = np.asarray(negatives, dtype=np.int64)
    pos = tsum(e_u * F.embedding(table, targets, padding_idx=0), axis=1, keepdims=True)
    neg = matmul(e_u, F.embedding(table, negatives, padding_idx=0).transpose())
    clash = (negatives[None, :] == targets[:, None]).astype(e_u.dtype) * -1e9
    logits = concat([pos, neg + clash], axis=1)
    return F.cross_entropy(logits, np.zeros(len(targets), dtype=np.int64))


@dataclass
class LossBundle:
    l_tower: Tensor
    l_kl: Tensor | None
    l_total: Tensor
    lam: float


def total_loss(l_tower, l_kl, lam: float) -> LossBundle:
    l_tower = as_tensor(l_tower)
    if l_kl is None:
        return LossBundle(l_tower, None, l_tower, lam)
    l_kl = as_tensor(l_kl)
    return LossBundle(l_tower, l_kl, l_tower + l_kl * lam, lam)
