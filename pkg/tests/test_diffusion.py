import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from t2diff import diffusion as D
from t2diff.numerics import Tensor, grad_check_many, precision
from t2diff.numerics.rng import stream


# ---------------------------------------------------------------- schedules
def test_constant_schedule_closed_form():
    s = D.build_schedule(a=0.01, b=0.0, T=20)
    np.testing.assert_allclose(s.beta, 0.01, rtol=0, atol=0)
    np.testing.assert_allclose(s.alpha_bar, 0.99 ** np.arange(1, 21), rtol=1e-13)


def test_exponential_alpha_bar_brute_force():
    s = D.build_schedule(a=1e-4, b=0.1, T=50)
    prod = 1.0
    for t in range(1, 51):
        prod *= 1.0 - 1e-4 * math.exp(0.1 * t)
    assert s.alpha_bar[-1] == pytest.approx(prod, rel=1e-12)


def test_default_schedule():
    s = D.build_schedule()
    assert s.T == 50 and s.kind == "exp"
    assert s.beta[-1] == pytest.approx(0.02, rel=1e-12)
    assert s.b == pytest.approx(math.log(200) / 50)


def test_out_of_range_beta_names_step():
    with pytest.raises(D.ScheduleError, match=r"beta\[10\]"):
        D.build_schedule(a=0.1, b=math.log(10) / 10 + 1e-3, T=12)
    with pytest.raises(D.ScheduleError):
        D.build_schedule(a=-1.0)


def test_matched_endpoints():
    ends = {k: D.schedule_with_endpoints(k, 50) for k in D.SCHEDULE_KINDS}
    for s in ends.values():
        assert s.beta[0] == pytest.approx(ends["exp"].beta[0], rel=1e-12)
        assert s.beta[-1] == pytest.approx(ends["exp"].beta[-1], rel=1e-12)
    # log rises fastest and linear sits between it and exp in the middle
    mid = 25
    assert ends["log"].beta[mid] > ends["linear"].beta[mid] > ends["exp"].beta[mid]


@given(st.floats(1e-5, 1e-2), st.floats(-0.05, 0.2), st.integers(1, 300), st.sampled_from(D.SCHEDULE_KINDS))
def test_schedule_identities(a, b, T, kind):
    assume(a * math.exp(b * T) < 0.5 and a * math.exp(b) < 0.5)
    s = D.build_schedule(a, b, T, kind)
    assert s.one_minus_alpha_bar[0] == s.beta[0]
    assert s.beta_tilde[0] == 0.0
    np.testing.assert_allclose(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:], rtol=1e-14)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(s.beta_tilde <= s.beta + 1e-15)


# ---------------------------------------------------------------- drift
def test_drift_prepare_example():
    z = D.drift_prepare(np.array([[1.0, 2.0], [3.0, 5.0], [4.0, 9.0]]))
    np.testing.assert_array_equal(z.data, [[2.0, 3.0], [1.0, 4.0]])


def test_drift_prepare_constant_sequence():
    assert np.all(D.drift_prepare(np.ones((5, 3))).data == 0)


def test_drift_prepare_needs_two_rows():
    with pytest.raises(ValueError):
        D.drift_prepare(np.ones((1, 3)))


def test_inverse_pair_on_exact_grid(f64):
    # values on the float32 grid make the subtraction and re-addition exact in float64
    X = np.random.default_rng(0).standard_normal((4, 7, 5)).astype(np.float32).astype(np.float64)
    z = D.drift_prepare(X)
    x_next = D.drift_utilize(z, X[:, :-1])
    np.testing.assert_array_equal(x_next.data, X[:, -1])


# ---------------------------------------------------------------- forward corruption
def test_q_sample_noiseless_and_pure_noise(f64):
    s = D.build_schedule()
    z0 = np.random.default_rng(1).standard_normal((2, 3, 4))
    e = np.random.default_rng(2).standard_normal(z0.shape)
    np.testing.assert_allclose(D.q_sample(z0, 7, np.zeros_like(z0), s).data, math.sqrt(s.alpha_bar[6]) * z0)
    np.testing.assert_allclose(D.q_sample(np.zeros_like(z0), 7, e, s).data,
                               math.sqrt(1 - s.alpha_bar[6]) * e)


def test_q_sample_variance_monte_carlo():
    s = D.build_schedule()
    rng = np.random.default_rng(3)
    z0 = rng.standard_normal(10**5) * 2.0
    for r in (1, 10, 50):
        zr = D.q_sample(z0, r, rng.standard_normal(z0.shape), s).data
        want = s.alpha_bar[r - 1] * z0.var() + (1 - s.alpha_bar[r - 1])
        assert zr.var() == pytest.approx(want, rel=0.02)


def test_q_sample_step_range():
    s = D.build_schedule(T=10)
    with pytest.raises(D.ScheduleError):
        D.q_sample(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(D.ScheduleError):
        D.q_sample(np.zeros(3), 11, np.zeros(3), s)


def test_one_shot_matches_composed_steps():
    s = D.build_schedule()
    rng = np.random.default_rng(4)
    n, z0, r = 10**4, 1.5, 30
    z = np.full(n, z0)
    for t in range(1, r + 1):
        z = math.sqrt(1 - s.beta[t - 1]) * z + math.sqrt(s.beta[t - 1]) * rng.standard_normal(n)
    shot = D.q_sample(np.full(n, z0), r, rng.standard_normal(n), s).data
    assert shot.mean() == pytest.approx(z.mean(), rel=0.02)
    assert shot.var() == pytest.approx(z.var(), rel=0.02)


# ---------------------------------------------------------------- reverse step
def scalar_posterior(t, zt, z0h, beta):
    """Independent scalar evaluation of the posterior mean and variance."""
    ab = [1.0]
    for b in beta:
        ab.append(ab[-1] * (1 - b))
    bt, abt, abp = beta[t - 1], ab[t], ab[t - 1]
    mean = math.sqrt(abp) * bt / (1 - abt) * z0h + math.sqrt(1 - bt) * (1 - abp) / (1 - abt) * zt
    var = (1 - abp) / (1 - abt) * bt
    return mean, var


def test_fusion_at_t1_is_exact(f64):
    s = D.build_schedule()
    rng = np.random.default_rng(5)
    z0h = rng.standard_normal((2, 4, 3))
    out = D.fusion(rng.standard_normal(z0h.shape), z0h, 1, rng.standard_normal(z0h.shape), s)
    np.testing.assert_array_equal(out.data, z0h)


def test_fusion_coefficients_per_step():
    s = D.build_schedule()
    for t in range(1, s.T + 1):
        m1, _ = scalar_posterior(t, 1.0, 0.0, list(s.beta))
        m0, _ = scalar_posterior(t, 0.0, 1.0, list(s.beta))
        assert s.coef_zt[t - 1] == pytest.approx(m1, rel=1e-9, abs=1e-15)
        assert s.coef_z0[t - 1] == pytest.approx(m0, rel=1e-9)
        total = (math.sqrt(s.alpha_bar_prev[t - 1]) * s.beta[t - 1]
                 + math.sqrt(s.alpha[t - 1]) * (1 - s.alpha_bar_prev[t - 1])) / (1 - s.alpha_bar[t - 1])
        assert s.coef_z0[t - 1] + s.coef_zt[t - 1] == pytest.approx(total, rel=1e-9)


def test_fusion_generic_step_hand_evaluated(f64):
    s = D.build_schedule(a=1e-4, b=0.1, T=50)
    zt, z0h = 0.7, -1.3
    mean, var = scalar_posterior(5, zt, z0h, list(s.beta))
    got = D.fusion(np.array([zt]), np.array([z0h]), 5, np.zeros(1), s).data[0]
    assert got == pytest.approx(mean, rel=1e-9)
    assert s.beta_tilde[4] == pytest.approx(var, rel=1e-9)
    noisy = D.fusion(np.array([zt]), np.array([z0h]), 5, np.ones(1), s).data[0]
    assert noisy - got == pytest.approx(math.sqrt(var), rel=1e-9)


# ---------------------------------------------------------------- approximator
@pytest.mark.parametrize("n, d", [(4, 8), (50, 8), (4, 64), (50, 64)])
def test_unet_shape_and_zero_init(n, d):
    net = D.UNet1D(d, np.random.default_rng(0))
    z = np.random.default_rng(1).standard_normal((2, n, d)).astype(np.float32)
    out = D.approximate(Tensor(z), Tensor(z), np.array([3, 9]), net)
    assert out.shape == (2, n, d)
    assert np.all(out.data == 0)


def test_unet_rejects_mismatched_inputs():
    net = D.UNet1D(8, np.random.default_rng(0))
    with pytest.raises(ValueError):
        net(Tensor(np.zeros((1, 4, 8))), Tensor(np.zeros((1, 5, 8))), 1)


def test_unet_kl_gradient(f64):
    from t2diff.numerics import nn
    rng = np.random.default_rng(6)
    net = D.UNet1D(4, rng)
    net.out = nn.Conv1d(8, 4, 3, rng)
    X = rng.standard_normal((2, 5, 4))
    nxt = rng.standard_normal((2, 4))
    steps, eps = np.array([2, 9]), rng.standard_normal((2, 5, 4))
    sched = D.build_schedule(T=10)
    f = lambda: D.train_step(X, nxt, None, sched, net, steps=steps, eps=eps).loss
    assert grad_check_many(f, net.parameters(), h=1e-4, n_samples=6) < 1e-4


# ---------------------------------------------------------------- training step
def oracle_stub(target):
    return lambda z_t, X, t: Tensor(target)


def test_perfect_stub_zero_loss(f64):
    rng = np.random.default_rng(7)
    X, nxt = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 3))
    z0 = D.drift_prepare(np.concatenate([X, nxt[:, None]], axis=1)).data
    s = D.build_schedule()
    res = D.train_step(X, nxt, None, s, oracle_stub(z0), steps=np.ones(2, int), eps=np.zeros_like(X))
    assert float(res.loss.data) == 0.0


def test_offset_stub_loss_is_c_squared(f64):
    rng = np.random.default_rng(8)
    X, nxt = rng.standard_normal((3, 5, 2)), rng.standard_normal((3, 2))
    z0 = D.drift_prepare(np.concatenate([X, nxt[:, None]], axis=1)).data
    res = D.train_step(X, nxt, rng, D.build_schedule(), oracle_stub(z0 + 0.25))
    assert float(res.loss.data) == pytest.approx(0.0625, rel=1e-12)


def test_expected_loss_over_uniform_steps(f64):
    s = D.build_schedule(T=8)
    rng = np.random.default_rng(9)
    X, nxt = rng.standard_normal((1, 3, 2)), rng.standard_normal((1, 2))
    eps = rng.standard_normal((1, 3, 2))
    stub = lambda z_t, X_, t: z_t * 0.5
    exact = np.mean([float(D.train_step(X, nxt, None, s, stub, steps=np.array([r]), eps=eps).loss.data)
                     for r in range(1, 9)])
    draws = [float(D.train_step(X, nxt, rng, s, stub, eps=eps).loss.data) for _ in range(4000)]
    se = np.std(draws) / math.sqrt(len(draws))
    assert abs(np.mean(draws) - exact) < 4 * se


def test_padding_stays_zero_and_is_excluded(f64):
    rng = np.random.default_rng(10)
    X, nxt = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 3))
    mask = np.array([[False, True, True, True], [True, True, True, True]])
    X[0, 0] = 0.0
    stub = lambda z_t, X_, t: z_t
    res = D.train_step(X, nxt, rng, D.build_schedule(), stub, mask=mask)
    assert np.all(res.z0.data[0, 0] == 0) and np.all(res.z0_hat.data[0, 0] == 0)
    diff = (res.z0_hat.data - res.z0.data) ** 2
    assert float(res.loss.data) == pytest.approx(diff[mask].mean(), rel=1e-12)


# ---------------------------------------------------------------- inference
def test_reverse_with_one_step_and_perfect_stub(f64):
    rng = np.random.default_rng(11)
    # integer-valued embeddings keep drift arithmetic exact
    full = rng.integers(-5, 5, size=(3, 6, 4)).astype(np.float64)
    X, nxt = full[:, :-1], full[:, -1]
    z0 = D.drift_prepare(full).data
    out = D.reverse_infer(X, rng, D.build_schedule(T=1), oracle_stub(z0))
    np.testing.assert_array_equal(out, nxt)


def test_reverse_is_deterministic():
    net = D.UNet1D(4, np.random.default_rng(0), zero_init_output=False)
    X = Tensor(np.random.default_rng(1).standard_normal((2, 5, 4)).astype(np.float32))
    s = D.build_schedule(T=10)
    a = D.reverse_infer(X, stream(3, "infer"), s, net)
    b = D.reverse_infer(X, stream(3, "infer"), s, net)
    np.testing.assert_array_equal(a, b)


def test_reverse_without_drift_returns_last_row(f64):
    rng = np.random.default_rng(12)
    X = rng.standard_normal((1, 3, 2))
    target = rng.standard_normal((1, 3, 2))
    out = D.reverse_infer(X, rng, D.build_schedule(T=1), oracle_stub(target), use_drift=False)
    np.testing.assert_array_equal(out, target[:, -1])


# ---------------------------------------------------------------- similarity
def test_similarity_trace_cases():
    z = np.array([[1.0, 2.0], [3.0, -1.0]])
    assert D.similarity_trace(z, z) == pytest.approx(1.0)
    assert D.similarity_trace(z, -z) == pytest.approx(-1.0)
    assert D.similarity_trace(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0
    assert math.isnan(D.similarity_trace(z, np.zeros_like(z)))


@given(st.integers(0, 2**31 - 1))
def test_similarity_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    assert D.similarity_trace(a, 3.0 * b) == pytest.approx(D.similarity_trace(a, b), abs=1e-12)
    assert -1 - 1e-12 <= D.similarity_trace(a, b) <= 1 + 1e-12


def test_schedule_rows():
    with precision(np.float64):
        rows = D.build_schedule(1e-4, 0.1, 50).to_rows()
    assert len(rows) == 50 and rows[0][0] == 1 and rows[0][3] == 0.0
