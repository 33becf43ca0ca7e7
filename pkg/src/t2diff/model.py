"""The full T2Diff model: shared item table, drift diffusion and the user tower."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffusion
from .data import BehaviorSequence
from .numerics import nn
from .numerics.tensor import Tensor, no_grad
from .towers import LossBundle, UserTower, lag_buckets, total_loss, tower_loss

VARIANTS = ("full", "mixed_attention_only", "no_drift_prep")


@dataclass
class Batch:
    """Left-padded arrays for a set of examples; padding index is 0."""

    items: np.ndarray  # (B, n) int64
    mask: np.ndarray  # (B, n) bool
    k: np.ndarray  # (B,) session lengths
    lag: np.ndarray  # (B, n) lag bucket per position
    target: np.ndarray  # (B,)
    user: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.target)

    def take(self, idx) -> "Batch":
        return Batch(self.items[idx], self.mask[idx], self.k[idx], self.lag[idx], self.target[idx], self.user[idx])


def encode(examples: Sequence[BehaviorSequence], max_len: int) -> Batch:
    """Pack examples (each already session-split) into padded arrays."""
    b = len(examples)
    items = np.zeros((b, max_len), dtype=np.int64)
    ts = np.zeros((b, max_len), dtype=np.int64)
    mask = np.zeros((b, max_len), dtype=bool)
    k = np.zeros(b, dtype=np.int64)
    target = np.zeros(b, dtype=np.int64)
    user = np.zeros(b, dtype=np.int64)
    last_ts = np.zeros(b, dtype=np.int64)
    for i, s in enumerate(examples):
        seq = s.items[: s.n][-max_len:]
        sts = s.timestamps[: s.n][-max_len:]
        n = len(seq)
        items[i, max_len - n :] = seq
        ts[i, max_len - n :] = sts
        mask[i, max_len - n :] = True
        k[i] = min(s.k, n)
        target[i] = s.target
        user[i] = s.user_id
        last_ts[i] = sts[-1]
    lag = lag_buckets(last_ts[:, None] - ts)
    return Batch(items, mask, k, lag, target, user)


class T2Diff(nn.Module):
    def __init__(self, item_count: int, d: int, k_max: int, rng: np.random.Generator,
                 variant: str = "full", heads: int = 2, layers: int = 1):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.item_count = item_count
        self.d = d
        self.items = nn.Embedding(item_count + 1, d, rng)
        self.unet = diffusion.UNet1D(d, rng) if variant != "mixed_attention_only" else None
        self.user = UserTower(d, k_max, rng, heads=heads, layers=layers)

    @property
    def uses_diffusion(self) -> bool:
        return self.unet is not None

    @property
    def use_drift(self) -> bool:
        return self.variant == "full"

    def forward_train(self, batch: Batch, rng: np.random.Generator, schedule: diffusion.NoiseSchedule,
                      lam: float, negatives: np.ndarray | None = None) -> tuple[LossBundle, float]:
        """Losses for one batch plus the mean cosine between true and predicted drift."""
        X = self.items(batch.items)
        x_hat = None
        l_kl = None
        sim = float("nan")
        if self.uses_diffusion:
            tgt = self.items(batch.target)
            res = diffusion.train_step(X.detach(), tgt.detach(), rng, schedule, self.unet,
                                       mask=batch.mask, use_drift=self.use_drift)
            l_kl = res.loss
            x_hat = Tensor(res.x_hat)
            sim = diffusion.batch_similarity(res.z0.data, res.z0_hat.data)
        e_u = self.user(X, batch.mask, batch.k, batch.lag, x_hat)
        l_tower = tower_loss(e_u, self.items.weight, batch.target, negatives)
        return total_loss(l_tower, l_kl, lam), sim

    def predict_next(self, batch: Batch, schedule: diffusion.NoiseSchedule, noise) -> np.ndarray:
        X = self.items.weight.data[batch.items]
        return diffusion.reverse_infer(X, noise, schedule, self.unet, mask=batch.mask, use_drift=self.use_drift)

    def user_embeddings(self, batch: Batch, schedule: diffusion.NoiseSchedule, noise=None) -> np.ndarray:
        """Inference-time user vectors; runs the full reverse loop when diffusion is on."""
        with no_grad():
            x_hat = None
            if self.uses_diffusion:
                x_hat = Tensor(self.predict_next(batch, schedule, noise))
            X = self.items(batch.items)
            return self.user(X, batch.mask, batch.k, batch.lag, x_hat).data

    def item_matrix(self) -> np.ndarray:
        """Candidate embeddings for items ``1..item_count`` (row ``i-1`` is item ``i``)."""
        return self.items.weight.data[1:]


def per_user_noise(seed: int, users: np.ndarray, shape_nd: tuple[int, int], dtype=np.float64):
    """Noise callable giving every user its own reproducible stream.

    Draw ``i`` for a batch is the ``i``-th standard-normal ``(n, d)`` block of
    each user's stream, so results do not depend on how users are batched.
    """
    from .numerics.rng import stream

    gens = [stream(seed, "infer", int(u)) for u in users]

    def draw(_i):
        return np.stack([g.standard_normal(shape_nd) for g in gens]).astype(dtype, copy=False)

    return draw
