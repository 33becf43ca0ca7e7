"""Compare the numba kernels against their pure-numpy twins.

Usage::

    python benchmarks/bench_kernels.py            # per-kernel table
    python benchmarks/bench_kernels.py --e2e      # also time training steps per backend

The end-to-end mode runs a short training loop twice in subprocesses, once
with ``T2DIFF_NO_NUMBA=1``, because the backend is fixed at import time.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from t2diff.numerics import kernels


def cases(rng: np.random.Generator):
    b, n, d, items = 256, 50, 64, 3706
    idx = rng.integers(0, items + 1, size=b * n)
    vals = rng.standard_normal((b * n, d)).astype(np.float32)
    gcols = rng.standard_normal((b, n, 3, 2 * d)).astype(np.float32)
    x = rng.standard_normal((b, n, 4 * d)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    logits = rng.standard_normal((b, items)).astype(np.float32)
    tgt = rng.integers(0, items, size=b)
    scores = rng.standard_normal((b, items))
    excl = rng.random((b, items)) < 0.01
    return {
        "scatter_add_rows": ((idx, vals, items + 1), {}),
        "col2im1d": ((gcols, n + 2, 1), {}),
        "gelu_forward": ((x,), {}),
        "gelu_backward": ((x, g), {}),
        "softmax_xent": ((logits, tgt), {}),
        "target_ranks": ((scores, tgt, excl), {}),
    }


def bench(repeat: int) -> list[tuple[str, float, float, float]]:
    rows = []
    for name, (args, kw) in cases(np.random.default_rng(0)).items():
        fast = getattr(kernels, f"{name}_numba")
        slow = getattr(kernels, f"{name}_numpy")
        a, b = fast(*args, **kw), slow(*args, **kw)  # warm up and compile
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(u, v, rtol=1e-4, atol=1e-4)
        t_nb = min(timeit.repeat(lambda: fast(*args, **kw), number=1, repeat=repeat))
        t_np = min(timeit.repeat(lambda: slow(*args, **kw), number=1, repeat=repeat))
        rows.append((name, t_nb * 1e3, t_np * 1e3, t_np / t_nb))
    return rows


E2E = """
import time
from t2diff import synthetic, data
from t2diff.config import TrainConfig
from t2diff import experiment
split = data.prepare(synthetic.session_interactions(0, users=200, items=120), max_len=20)
cfg = TrainConfig(d=32, max_len=20, batch_size=128, epochs=1, T=20)
experiment.train(split, cfg, max_steps=2)
t0 = time.perf_counter()
experiment.train(split, cfg, max_steps=20)
print(time.perf_counter() - t0)
"""


def end_to_end() -> dict[str, float]:
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, T2DIFF_NO_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        out[label] = float(res.stdout.strip().splitlines()[-1])
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=7)
    p.add_argument("--e2e", action="store_true")
    args = p.parse_args(argv)
    print(f"{'kernel':18s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, t_nb, t_np, ratio in bench(args.repeat):
        note = "  (numpy used in both modes)" if name in kernels.NUMPY_ONLY else ""
        print(f"{name:18s} {t_nb:10.3f} {t_np:10.3f} {ratio:7.1f}x{note}")
    if args.e2e:
        t = end_to_end()
        print(f"20 training steps + validation: numba {t['numba']:.2f} s, numpy {t['numpy']:.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
