"""Finite-difference gradient checks of every trainable subnetwork.

Each check builds a tiny float64 model with the output layer of the U-Net
randomly initialised (a zero-initialised output would make every upstream
gradient trivially zero), runs the real loss, and compares backprop against
central differences on the parameters of one subnetwork.
"""
from __future__ import annotations

import numpy as np

from . import diffusion
from .model import T2Diff, Batch
from .numerics import nn
from .numerics.gradcheck import grad_check_many
from .numerics.tensor import Tensor, precision
from .towers import N_LAG_BUCKETS, tower_loss

SUBNETWORKS = ("unet", "session_encoder", "activation_unit", "output_net", "embedding")
SHAPES = ((2, 4, 4), (3, 5, 6), (2, 8, 8))  # (batch, n, d)
DEFAULT_H = 1e-4


def _tiny_batch(rng: np.random.Generator, b: int, n: int, items: int) -> Batch:
    lengths = rng.integers(2, n + 1, size=b)
    lengths[0] = n
    mask = np.arange(n)[None, :] >= (n - lengths)[:, None]
    seq = np.where(mask, rng.integers(1, items + 1, size=(b, n)), 0)
    k = np.minimum(rng.integers(1, 4, size=b), lengths)
    lag = rng.integers(0, N_LAG_BUCKETS, size=(b, n))
    return Batch(seq, mask, k, lag, rng.integers(1, items + 1, size=b), np.arange(1, b + 1))


def check_subnetworks(seed: int, shape=(2, 4, 4), h: float = DEFAULT_H, n_samples: int = 8,
                      subnetworks=SUBNETWORKS) -> dict[str, float]:
    """Max relative gradient error per subnetwork for one random tiny model."""
    b, n, d = shape
    out = {}
    with precision(np.float64):
        rng = np.random.default_rng(seed)
        items = 7
        model = T2Diff(items, d, k_max=3, rng=rng)
        model.unet.out = nn.Conv1d(2 * d, d, 3, rng)
        batch = _tiny_batch(rng, b, n, items)
        schedule = diffusion.build_schedule(T=10)
        steps = rng.integers(1, 11, size=b)
        eps = rng.standard_normal((b, n, d))
        x_hat = rng.standard_normal((b, d))

        def kl_loss():
            X = model.items(batch.items).detach()
            tgt = model.items(batch.target).detach()
            return diffusion.train_step(X, tgt, None, schedule, model.unet, mask=batch.mask,
                                        steps=steps, eps=eps).loss

        def tower():
            X = model.items(batch.items)
            e_u = model.user(X, batch.mask, batch.k, batch.lag, Tensor(x_hat))
            return tower_loss(e_u, model.items.weight, batch.target)

        groups = {
            "unet": (kl_loss, model.unet.parameters()),
            "session_encoder": (tower, model.user.session.parameters()),
            "activation_unit": (tower, model.user.unit.parameters() + model.user.lag.parameters()),
            "output_net": (tower, model.user.out.parameters()),
            "embedding": (tower, model.items.parameters()),
        }
        for name in subnetworks:
            fn, params = groups[name]
            out[name] = grad_check_many(fn, params, h=h, n_samples=n_samples,
                                        rng=np.random.default_rng(seed + 1))
    return out
