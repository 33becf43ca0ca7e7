import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from t2diff.numerics import (
    CheckpointFormatError, GraphError, NumericalError, ShapeError, Tensor, concat, conv1d,
    cross_entropy, embedding, gaussian, gelu, grad_check, grad_check_many, kernels, layer_norm,
    load_params, matmul, no_grad, precision, relu, save_params, softmax, softplus, stream,
    upsample_linear,
)
from t2diff.numerics import nn, tensor as T
from t2diff.numerics.optim import Adam


# ---------------------------------------------------------------- forward semantics
def test_softmax_symmetric():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_conv1d_identity_kernel(f64):
    x = np.random.default_rng(0).standard_normal((2, 7, 3))
    w = np.eye(3)[None]  # K=1
    np.testing.assert_array_equal(conv1d(Tensor(x), Tensor(w)).data, x)


def test_conv1d_matches_direct_sum(f64):
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 9, 3)), rng.standard_normal((3, 3, 4)), rng.standard_normal(4)
    for stride in (1, 2):
        got = conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
        xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
        want = np.stack([sum(xp[:, o * stride + k] @ w[k] for k in range(3)) + b
                         for o in range(got.shape[1])], axis=1)
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_concat_feature_axis():
    a = Tensor(np.ones((5, 4)))
    assert concat([a, a], axis=-1).shape == (5, 8)


def test_upsample_linear_constant_and_length():
    x = Tensor(np.ones((1, 3, 2)))
    y = upsample_linear(x, 6)
    assert y.shape == (1, 6, 2)
    np.testing.assert_allclose(y.data, 1.0, rtol=1e-6)


@pytest.mark.parametrize("fn, args, op", [
    (matmul, (np.ones((2, 3)), np.ones((4, 5))), "matmul"),
    (lambda a, b: Tensor(a) + Tensor(b), (np.ones((2, 3)), np.ones((4,))), "add"),
    (conv1d, (np.ones((1, 4, 3)), np.ones((3, 2, 2))), "conv1d"),
    (layer_norm, (np.ones((2, 3)), np.ones(4), np.ones(4)), "layer_norm"),
])
def test_shape_errors_name_the_op(fn, args, op):
    with pytest.raises(ShapeError, match=op):
        fn(*[Tensor(a) for a in args])


# ---------------------------------------------------------------- graph contracts
def test_linear_gradient(f64):
    W = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x = np.array([1.0, -2.0, 0.5])
    matmul(W, x[:, None]).sum().backward()
    np.testing.assert_array_equal(W.grad, np.tile(x, (2, 1)))


def test_detach_is_a_wall(f64):
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    loss = (a * 2.0).detach().sum() * 3.0 + (b * b).sum()
    loss.backward()
    assert np.all(a.grad == 0)
    np.testing.assert_array_equal(b.grad, 2.0)


def test_second_backward_needs_reset(f64):
    a = Tensor(np.ones(2), requires_grad=True)
    loss = (a * a).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()
    loss.reset()
    assert np.all(a.grad == 0)
    loss.backward()
    np.testing.assert_array_equal(a.grad, 2.0)


def test_non_scalar_backward_rejected():
    with pytest.raises(GraphError, match="scalar"):
        (Tensor(np.ones(2), requires_grad=True) * 2.0).backward()


def test_non_participating_leaf_stays_zero(f64):
    a = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    (a * 3.0).sum().backward()
    assert np.all(unused.grad == 0)


def test_shared_node_visited_once(f64):
    a = Tensor(np.array([2.0]), requires_grad=True)
    h = a * a
    (h + h * h).sum().backward()  # d/da (a^2 + a^4) = 2a + 4a^3
    np.testing.assert_allclose(a.grad, [4.0 + 32.0])


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = a * 2.0
    assert not y.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_non_finite(monkeypatch):
    monkeypatch.setattr(T, "DEBUG", True)
    with pytest.raises(NumericalError):
        T.log(Tensor(np.array([-1.0])))


# ---------------------------------------------------------------- gradient checks
def test_quadratic_grad_check(f64):
    theta = Tensor(np.random.default_rng(0).standard_normal(6), requires_grad=True)
    assert grad_check(lambda: (theta * theta).sum(), theta, h=1e-5) < 1e-8


def test_random_three_op_graph(f64):
    rng = np.random.default_rng(3)
    W = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    x = rng.standard_normal((3, 4))
    v = rng.standard_normal((3, 5))
    assert grad_check(lambda: (T.tanh(matmul(x, W)) * v).sum(), W, h=1e-5) < 1e-4


def _op_cases(rng):
    """(name, leaves, loss builder); the loss weights outputs randomly."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    away = np.where(np.abs(a) < 0.1, 0.5, a)  # away from 0: the relu kink
    sq = rng.standard_normal((4, 5))
    seq = rng.standard_normal((2, 6, 3))
    ker = rng.standard_normal((3, 3, 2))
    w = rng.standard_normal((3, 4))
    table = rng.standard_normal((6, 3))
    idx = rng.integers(0, 6, size=(2, 4))
    out = []

    def weighted(fn, *arrays, weights=None):
        leaves = [Tensor(x.copy(), requires_grad=True) for x in arrays]

        def loss():
            y = fn(*leaves)
            wt = weights if weights is not None else np.random.default_rng(7).standard_normal(y.shape)
            return (y * wt).sum()
        return leaves, loss

    out.append(("add", *weighted(lambda x, y: x + y, a, b[:1])))
    out.append(("sub", *weighted(lambda x, y: x - y, a, b)))
    out.append(("mul", *weighted(lambda x, y: x * y, a, b)))
    out.append(("div", *weighted(lambda x, y: x / y, a, pos)))
    # central differences of x**3 carry an exact h**2 term, swamping 3x**2 near 0
    out.append(("power", *weighted(lambda x: x ** 3, away)))
    out.append(("matmul", *weighted(lambda x, y: matmul(x, y), a, sq)))
    out.append(("mean", *weighted(lambda x: x.mean(axis=0), a)))
    out.append(("reshape_transpose", *weighted(lambda x: x.reshape(4, 3).transpose(), a)))
    out.append(("getitem", *weighted(lambda x: x[np.array([0, 2, 0]), 1:], a)))
    out.append(("concat", *weighted(lambda x, y: concat([x, y], axis=1), a, b)))
    out.append(("exp", *weighted(T.exp, a)))
    out.append(("log", *weighted(T.log, pos)))
    out.append(("sqrt", *weighted(T.sqrt, pos)))
    out.append(("tanh", *weighted(T.tanh, a)))
    out.append(("sigmoid", *weighted(T.sigmoid, a)))
    out.append(("relu", *weighted(relu, away)))
    out.append(("softplus", *weighted(softplus, a)))
    out.append(("log_softplus", *weighted(lambda x: T.log_softplus(x * 8), a)))
    out.append(("gelu", *weighted(gelu, a)))
    out.append(("softmax", *weighted(lambda x: softmax(x, axis=-1), a)))
    out.append(("layer_norm", *weighted(layer_norm, a, w[0], w[1])))
    out.append(("conv1d", *weighted(lambda x, k: conv1d(x, k, stride=2), seq, ker)))
    out.append(("upsample_linear", *weighted(lambda x: upsample_linear(x, 11), seq)))
    out.append(("embedding", *weighted(lambda t: embedding(t, idx, padding_idx=None), table)))
    tgt = rng.integers(0, 4, size=3)
    out.append(("cross_entropy", *weighted(lambda x: cross_entropy(x, tgt), a, weights=1.0)))
    return out


OP_NAMES = [c[0] for c in _op_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", OP_NAMES)
def test_every_op_grad_checks_over_seeds(f64, name):
    worst = 0.0
    for seed in range(20):
        cases = {c[0]: c for c in _op_cases(np.random.default_rng(seed))}
        _, leaves, loss = cases[name]
        worst = max(worst, grad_check_many(loss, leaves, h=1e-5, n_samples=None))
    assert worst < 1e-4, f"{name}: {worst:.2e}"


# ---------------------------------------------------------------- kernels
@given(st.integers(1, 40), st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_scatter_add_kernels_agree(n, d, rows, seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, rows, size=n)
    vals = rng.standard_normal((n, d))
    np.testing.assert_allclose(kernels.scatter_add_rows_numba(idx, vals, rows),
                               kernels.scatter_add_rows_numpy(idx, vals, rows), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 3), st.integers(1, 8), st.sampled_from([1, 3]), st.integers(1, 2),
       st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_col2im_kernels_agree(b, lout, k, stride, c, seed):
    g = np.random.default_rng(seed).standard_normal((b, lout, k, c))
    lp = (lout - 1) * stride + k
    np.testing.assert_allclose(kernels.col2im1d_numba(g, lp, stride), kernels.col2im1d_numpy(g, lp, stride),
                               rtol=1e-12, atol=1e-12)


@given(st.sampled_from([np.float32, np.float64]), st.integers(0, 2**31 - 1))
def test_gelu_kernels_agree(dtype, seed):
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal((3, 17)) * 4).astype(dtype)
    g = rng.standard_normal(x.shape).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(kernels.gelu_forward_numba(x), kernels.gelu_forward_numpy(x), rtol=tol, atol=tol)
    np.testing.assert_allclose(kernels.gelu_backward_numba(x, g), kernels.gelu_backward_numpy(x, g),
                               rtol=tol, atol=tol)
    assert kernels.gelu_forward_numba(x).dtype == dtype


def test_gelu_kernel_saturates_without_nan():
    x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    np.testing.assert_allclose(kernels.gelu_forward_numba(x), [0.0, 0.0, 0.0, 50.0, 1e4], atol=1e-12)
    assert np.all(np.isfinite(kernels.gelu_backward_numba(x, np.ones_like(x))))


@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_softmax_xent_kernels_agree(b, c, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((b, c)) * 5
    t = rng.integers(0, c, size=b)
    for u, v in zip(kernels.softmax_xent_numba(logits, t), kernels.softmax_xent_numpy(logits, t)):
        np.testing.assert_allclose(u, v, rtol=1e-10, atol=1e-12)


@given(st.integers(1, 6), st.integers(1, 12), st.booleans(), st.integers(0, 2**31 - 1))
def test_rank_kernels_agree(b, c, use_excl, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 3, size=(b, c)).astype(np.float64)  # many ties
    t = rng.integers(0, c, size=b)
    excl = rng.random((b, c)) < 0.3 if use_excl else None
    np.testing.assert_array_equal(kernels.target_ranks_numba(scores, t, excl),
                                  kernels.target_ranks_numpy(scores, t, excl))


def test_rank_tie_goes_to_lower_index():
    scores = np.array([[1.0, 1.0, 1.0]])
    assert kernels.target_ranks(scores, np.array([0])).tolist() == [1]
    assert kernels.target_ranks(scores, np.array([2])).tolist() == [3]


# ---------------------------------------------------------------- sampling
def test_gaussian_deterministic():
    a = gaussian(stream(42), (3, 4))
    b = gaussian(stream(42), (3, 4))
    np.testing.assert_array_equal(a.data, b.data)


def test_gaussian_moments():
    x = gaussian(stream(1, "moments"), (10**6,), dtype=np.float64).data
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.01


def test_gaussian_empty():
    assert gaussian(stream(0), (0,)).shape == (0,)


def test_streams_keyed_by_purpose():
    a = stream(5, 0, 1, "noise").standard_normal(4)
    b = stream(5, 0, 1, "step").standard_normal(4)
    c = stream(5, 0, 1, "noise").standard_normal(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, c)


# ---------------------------------------------------------------- modules and checkpoints
def test_embedding_padding_row_frozen():
    emb = nn.Embedding(5, 3, np.random.default_rng(0))
    opt = Adam(emb.parameters(), lr=0.1)
    for _ in range(3):
        opt.zero_grad()
        (emb(np.array([[0, 1, 2, 0]])) * 2.0).sum().backward()
        opt.step()
    assert np.all(emb.weight.data[0] == 0)


def test_adam_minimises_quadratic(f64):
    p = nn.Parameter(np.array([3.0, -2.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step()
    assert np.all(np.abs(p.data) < 1e-2)


def test_state_dict_mismatch():
    lin = nn.Linear(2, 3, np.random.default_rng(0))
    with pytest.raises(KeyError):
        lin.load_state_dict({"weight": np.zeros((2, 3))})


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_bit_exact(tmp_path, dtype):
    rng = np.random.default_rng(0)
    params = {"a.w": rng.standard_normal((3, 4)).astype(dtype), "b": rng.standard_normal(0).astype(dtype),
              "scalar": np.asarray(rng.standard_normal(), dtype=dtype)}
    save_params(tmp_path / "c", params)
    back = load_params(tmp_path / "c")
    assert list(back) == list(params)
    for k in params:
        assert back[k].dtype == params[k].dtype
        assert back[k].tobytes() == params[k].tobytes()


@pytest.mark.parametrize("mangle", [
    lambda b: b"NOPE" + b[4:],
    lambda b: b[:4] + bytes([7]) + b[5:],
    lambda b: b[:-1],
    lambda b: b + b"x",
])
def test_checkpoint_rejects_corruption(tmp_path, mangle):
    save_params(tmp_path / "c", {"w": np.ones((2, 2), dtype=np.float32)})
    (tmp_path / "c").write_bytes(mangle((tmp_path / "c").read_bytes()))
    with pytest.raises(CheckpointFormatError):
        load_params(tmp_path / "c")


def test_precision_context_restores():
    before = T.default_dtype()
    with precision(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert T.default_dtype() == before


_BACKEND_PROBE = """
import numpy as np
from t2diff import data, experiment
from t2diff.config import TrainConfig
from t2diff.numerics import kernels
from t2diff.synthetic import session_interactions
split = data.leave_one_out(data.build_sequences(session_interactions(2, users=30, items=20), max_len=10),
                           item_count=20, user_count=30)
res = experiment.train(split, TrainConfig(d=8, max_len=10, k_max=4, T=5, batch_size=32, epochs=1), max_steps=3)
print(kernels.BACKEND, *[s[4] for s in res.steps])
"""


def test_numpy_fallback_matches_numba_training():
    import os
    import subprocess
    import sys

    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, T2DIFF_NO_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c", _BACKEND_PROBE], capture_output=True, text=True, env=env)
        assert proc.returncode == 0, proc.stderr
        backend, *losses = proc.stdout.split()
        out[backend] = np.array(losses, dtype=float)
    assert set(out) == {"numba", "numpy"}
    np.testing.assert_allclose(out["numba"], out["numpy"], rtol=1e-4)


def test_log_softplus_matches_direct_form_and_stays_finite(f64):
    x = np.linspace(-30, 30, 61)
    np.testing.assert_allclose(T.log_softplus(Tensor(x)).data, np.log(np.log1p(np.exp(x))), rtol=1e-12)
    far = Tensor(np.array([-1e4, -800.0, 0.0, 800.0]), requires_grad=True)
    y = T.log_softplus(far)
    assert np.all(np.isfinite(y.data)) and y.data[0] == -1e4
    y.sum().backward()
    np.testing.assert_allclose(far.grad, [1.0, 1.0, 0.5 / np.log(2), 1 / 800.0], rtol=1e-12)
