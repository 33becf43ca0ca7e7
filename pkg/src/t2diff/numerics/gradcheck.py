"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(f: Callable[[], Tensor], theta: Tensor, h: float = 1e-5,
               n_samples: int | None = 20, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences on ``theta``.

    ``f`` rebuilds the scalar loss from the current parameter values; it must
    be deterministic.  ``theta.data`` is perturbed in place and restored.
    The error per coordinate is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    return grad_check_many(f, [theta], h=h, n_samples=n_samples, rng=rng)


def grad_check_many(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                    n_samples: int | None = 20, rng: np.random.Generator | None = None) -> float:
    params = list(params)
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss = f()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        if n_samples is None or n_samples >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = float(f().data)
                flat[i] = orig - h
                down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
