"""Drift diffusion: noise schedules, forward corruption, U-Net approximator, reverse sampling.

The diffused quantity is the *drift* between adjacent behavior embeddings,
``z0[j] = X[j+1] - X[j]``.  Training corrupts it in one shot at a random
step; inference starts from Gaussian noise and denoises step by step,
conditioned on the behavior sequence, then adds the drift back onto the
sequence to read off the predicted next behavior.

Arrays are batched: sequences are ``(B, n, d)`` with an optional boolean
validity mask ``(B, n)`` for left-padded rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import functional as F
from .numerics import nn
from .numerics.tensor import Tensor, as_tensor, concat, gelu, no_grad

SCHEDULE_KINDS = ("exp", "linear", "log")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step arrays indexed ``[t - 1]`` for ``t = 1..T``."""

    a: float
    b: float
    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    one_minus_alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    coef_z0: np.ndarray
    coef_zt: np.ndarray

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} outside 1..{self.T}")

    def to_rows(self) -> list[tuple[int, float, float, float]]:
        return [(t + 1, float(self.beta[t]), float(self.alpha_bar[t]), float(self.beta_tilde[t])) for t in range(self.T)]


def _betas(a: float, b: float, T: int, kind: str) -> np.ndarray:
    t = np.arange(1, T + 1, dtype=np.float64)
    if kind == "exp":
        return a * np.exp(b * t)
    first, last = a * math.exp(b), a * math.exp(b * T)
    if T == 1:
        return np.array([first])
    if kind == "linear":
        return first + (last - first) * (t - 1) / (T - 1)
    if kind == "log":
        return first + (last - first) * np.log(t) / math.log(T)
    raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


def build_schedule(a: float = 1e-4, b: float = math.log(0.02 / 1e-4) / 50, T: int = 50,
                   kind: str = "exp") -> NoiseSchedule:
    """Exponential ``beta_t = a * exp(b t)``; ``linear``/``log`` share its endpoints."""
    if a <= 0:
        raise ScheduleError(f"a must be positive, got {a}")
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    beta = _betas(a, b, T, kind)
    bad = np.nonzero(~((beta > 0) & (beta < 1)))[0]
    if bad.size:
        t = int(bad[0]) + 1
        raise ScheduleError(f"beta[{t}] = {beta[bad[0]]:.6g} is outside (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    oma = 1.0 - alpha_bar
    oma[0] = beta[0]  # exact: 1 - alpha_bar_1 = beta_1
    oma_prev = 1.0 - alpha_bar_prev
    oma_prev[0] = 0.0
    beta_tilde = oma_prev / oma * beta
    coef_z0 = np.sqrt(alpha_bar_prev) * beta / oma
    coef_zt = np.sqrt(alpha) * oma_prev / oma
    arrays = [beta, alpha, alpha_bar, alpha_bar_prev, oma, beta_tilde, coef_z0, coef_zt]
    for arr in arrays:
        arr.setflags(write=False)
    return NoiseSchedule(a, b, T, kind, *arrays)


def schedule_with_endpoints(kind: str, T: int, a: float = 1e-4, beta_last: float = 0.02) -> NoiseSchedule:
    """Schedule of the given kind whose exponential twin has ``beta_T = beta_last``."""
    return build_schedule(a, math.log(beta_last / a) / T, T, kind)


# ---------------------------------------------------------------- drift
def drift_prepare(X: Tensor | np.ndarray) -> Tensor:
    """``(.., n+1, d) -> (.., n, d)``: adjacent differences along the time axis."""
    X = as_tensor(X)
    if X.ndim < 2 or X.shape[-2] < 2:
        raise ValueError(f"drift_prepare needs at least 2 rows, got shape {X.shape}")
    return X[..., 1:, :] - X[..., :-1, :]


def drift_utilize(z0: Tensor | np.ndarray, X_seq: Tensor | np.ndarray) -> Tensor:
    """Add drift back onto the sequence and keep the last row: ``(.., d)``."""
    z0, X_seq = as_tensor(z0), as_tensor(X_seq)
    return z0[..., -1, :] + X_seq[..., -1, :]


def _per_sample(coef: np.ndarray, steps, ndim: int, dtype) -> np.ndarray:
    c = np.asarray(coef[np.asarray(steps) - 1], dtype=dtype)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def _check_steps(steps, schedule: NoiseSchedule) -> np.ndarray:
    s = np.asarray(steps)
    if s.size and (s.min() < 1 or s.max() > schedule.T):
        raise ScheduleError(f"steps must lie in 1..{schedule.T}, got range {s.min()}..{s.max()}")
    return s


def q_sample(z0, r, eps, schedule: NoiseSchedule) -> Tensor:
    """``z_r = sqrt(abar_r) z0 + sqrt(1 - abar_r) eps``; ``r`` scalar or per-sample."""
    z0, eps = as_tensor(z0), as_tensor(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != drift shape {z0.shape}")
    r = _check_steps(r, schedule)
    dt = z0.dtype
    sa = _per_sample(np.sqrt(schedule.alpha_bar), r, z0.ndim, dt)
    sb = _per_sample(np.sqrt(schedule.one_minus_alpha_bar), r, z0.ndim, dt)
    return z0 * sa + eps * sb


def fusion(z_t, z0_hat, t, eps, schedule: NoiseSchedule) -> Tensor:
    """One reverse step: posterior mean of ``z_{t-1}`` plus ``sqrt(beta_tilde_t)`` noise."""
    z_t, z0_hat, eps = as_tensor(z_t), as_tensor(z0_hat), as_tensor(eps)
    t = _check_steps(t, schedule)
    dt = z_t.dtype
    c0 = _per_sample(schedule.coef_z0, t, z_t.ndim, dt)
    ct = _per_sample(schedule.coef_zt, t, z_t.ndim, dt)
    sd = _per_sample(np.sqrt(schedule.beta_tilde), t, z_t.ndim, dt)
    return z0_hat * c0 + z_t * ct + eps * sd


def similarity_trace(z0, z0_hat) -> float:
    """Cosine similarity of the flattened arrays; ``nan`` when either norm is 0."""
    a = np.asarray(z0.data if isinstance(z0, Tensor) else z0, dtype=np.float64).reshape(-1)
    b = np.asarray(z0_hat.data if isinstance(z0_hat, Tensor) else z0_hat, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(a @ b / (na * nb))


def batch_similarity(z0: np.ndarray, z0_hat: np.ndarray) -> float:
    """Mean per-sample cosine over a batch, skipping zero-norm samples."""
    a = z0.reshape(len(z0), -1).astype(np.float64)
    b = z0_hat.reshape(len(z0_hat), -1).astype(np.float64)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        return float("nan")
    return float(np.mean((a[ok] * b[ok]).sum(1) / (na[ok] * nb[ok])))


# ---------------------------------------------------------------- approximator
class UNet1D(nn.Module):
    """Two-level 1-D U-Net over ``concat([z_t, X])`` with a step embedding.

    Widths run ``2d -> 4d -> 8d`` with stride-2 downsampling, linear
    upsampling and concatenated skips; the output conv starts at zero so the
    untrained approximator predicts zero drift.
    """

    def __init__(self, d: int, rng: np.random.Generator, kernel: int = 3, zero_init_output: bool = True):
        c0, c1, c2 = 2 * d, 4 * d, 8 * d
        self.d = d
        self.step_proj = nn.Linear(d, c0, rng)
        self.enc0 = nn.Conv1d(2 * d, c0, kernel, rng)
        self.enc1 = nn.Conv1d(c0, c1, kernel, rng, stride=2)
        self.enc2 = nn.Conv1d(c1, c2, kernel, rng, stride=2)
        self.dec1 = nn.Conv1d(c2 + c1, c1, kernel, rng)
        self.dec0 = nn.Conv1d(c1 + c0, c0, kernel, rng)
        self.out = nn.Conv1d(c0, d, kernel, rng, zero_init=zero_init_output)

    def __call__(self, z_t, X, t) -> Tensor:
        z_t, X = as_tensor(z_t), as_tensor(X)
        if z_t.shape != X.shape or z_t.ndim != 3 or z_t.shape[-1] != self.d:
            raise ValueError(f"approximate: z_t {z_t.shape} and X {X.shape} must both be (B, n, {self.d})")
        b = z_t.shape[0]
        steps = np.broadcast_to(np.asarray(t), (b,))
        temb = self.step_proj(nn.sinusoidal_embedding(steps, self.d, z_t.dtype))
        h0 = gelu(self.enc0(concat([z_t, X], axis=-1)) + temb.reshape(b, 1, -1))
        h1 = gelu(self.enc1(h0))
        h2 = gelu(self.enc2(h1))
        u1 = F.upsample_linear(h2, h1.shape[1])
        u1 = gelu(self.dec1(concat([u1, h1], axis=-1)))
        u0 = F.upsample_linear(u1, h0.shape[1])
        u0 = gelu(self.dec0(concat([u0, h0], axis=-1)))
        return self.out(u0)


Approximator = Callable[[Tensor, Tensor, np.ndarray], Tensor]


def approximate(z_t, X, t, params: Approximator, mask: np.ndarray | None = None) -> Tensor:
    """``z0_hat = f(z_t, X, t)`` with padded rows forced to zero."""
    out = params(z_t, X, t)
    if mask is not None:
        out = out * mask[..., None].astype(out.dtype)
    return out


def masked_mse(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over valid rows and all features."""
    diff = pred - target
    sq = diff * diff
    if mask is None:
        return sq.mean()
    m = mask[..., None].astype(sq.dtype)
    denom = max(float(m.sum()) * sq.shape[-1], 1.0)
    return (sq * m).sum() * (1.0 / denom)


@dataclass
class TrainStepResult:
    z0_hat: Tensor
    z0: Tensor
    loss: Tensor
    x_hat: np.ndarray
    steps: np.ndarray


def train_step(X_seq, x_next, rng: np.random.Generator, schedule: NoiseSchedule,
               params: Approximator, mask: np.ndarray | None = None,
               use_drift: bool = True, steps: np.ndarray | None = None,
               eps: np.ndarray | None = None) -> TrainStepResult:
    """One-shot corruption and reconstruction of the drift at a random step.

    ``X_seq`` is ``(B, n, d)`` and ``x_next`` ``(B, d)``; both should be
    detached embeddings.  With ``use_drift=False`` the target is the shifted
    sequence ``X[2:n+1]`` itself instead of the drift.  ``steps``/``eps`` may
    be supplied to freeze the randomness.
    """
    X_seq, x_next = as_tensor(X_seq), as_tensor(x_next)
    if X_seq.ndim != 3 or x_next.shape != (X_seq.shape[0], X_seq.shape[2]):
        raise ValueError(f"train_step: X {X_seq.shape} incompatible with target {x_next.shape}")
    b, n, d = X_seq.shape
    full = concat([X_seq, x_next.reshape(b, 1, d)], axis=1)
    z0 = drift_prepare(full) if use_drift else full[:, 1:, :]
    if mask is not None:
        z0 = z0 * mask[..., None].astype(z0.dtype)
    if steps is None:
        steps = rng.integers(1, schedule.T + 1, size=b)
    if eps is None:
        eps = rng.standard_normal((b, n, d))
    eps = np.asarray(eps, dtype=z0.dtype)
    if mask is not None:
        eps = eps * mask[..., None]
    z_r = q_sample(z0, steps, eps, schedule)
    z0_hat = approximate(z_r, X_seq, steps, params, mask)
    loss = masked_mse(z0_hat, z0.detach(), mask)
    last = z0_hat.data[:, -1, :]
    x_hat = last + X_seq.data[:, -1, :] if use_drift else last.copy()
    return TrainStepResult(z0_hat, z0, loss, x_hat, np.asarray(steps))


def reverse_infer(X_seq, noise: Callable[[int], np.ndarray] | np.random.Generator,
                  schedule: NoiseSchedule, params: Approximator,
                  mask: np.ndarray | None = None, use_drift: bool = True) -> np.ndarray:
    """Denoise from ``z_T ~ N(0, I)`` down to ``z_0`` and read off the next behavior.

    ``noise`` is either a generator (draws are taken in the order ``z_T``,
    then one ``eps'`` per step ``T..1``) or a callable ``noise(draw_index)``
    returning a ``(B, n, d)`` array, which lets callers give every user an
    independent stream.
    """
    X_seq = as_tensor(X_seq)
    shape = X_seq.shape
    if callable(noise) and not isinstance(noise, np.random.Generator):
        draw = noise
    else:
        gen = noise

        def draw(_i):
            return gen.standard_normal(shape)

    m = None if mask is None else mask[..., None].astype(X_seq.dtype)
    with no_grad():
        z = np.asarray(draw(0), dtype=X_seq.dtype)
        if m is not None:
            z = z * m
        for i, t in enumerate(range(schedule.T, 0, -1), start=1):
            z0_hat = approximate(Tensor(z), X_seq, np.full(shape[0], t), params, mask)
            eps = np.asarray(draw(i), dtype=X_seq.dtype)
            if m is not None:
                eps = eps * m
            z = fusion(Tensor(z), z0_hat, t, eps, schedule).data
    last = z[:, -1, :]
    return last + X_seq.data[:, -1, :] if use_drift else last
