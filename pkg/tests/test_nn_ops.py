import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alesal.nn import NonFiniteError, Tensor, grad_check
from alesal.nn import ops
from alesal.nn.ops import BatchNormState


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    """Reduce an op output to a scalar with fixed random weights."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return _sum_all(ops.mul(out, w))


def _sum_all(t: Tensor) -> Tensor:
    flat = ops.reshape(t, (1, -1))
    return ops.reshape(ops.matmul(flat, Tensor(np.ones((flat.shape[1], 1)))), ())


# -- dense -------------------------------------------------------------------


def test_dense_identity_and_zero_input():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    y = ops.dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x.data)
    b = np.array([0.5, -1.0, 2.0])
    y = ops.dense(Tensor(np.zeros((4, 3))), Tensor(np.ones((3, 3))), Tensor(b))
    np.testing.assert_array_equal(y.data, np.tile(b, (4, 1)))


def test_dense_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_dense_gradcheck():
    rng = np.random.default_rng(0)
    x, W, b = param(rng, 4, 3), param(rng, 3, 5), param(rng, 5)
    report = grad_check(lambda: weighted_sum(ops.dense(x, W, b)), [x, W, b], h=1e-5, tol=1e-6)
    assert report.passed, report


# -- grad_check itself ----------------------------------------------------------


def test_grad_check_skips_frozen_inputs():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3)))  # frozen
    W = param(rng, 3, 2)
    report = grad_check(lambda: weighted_sum(ops.dense(x, W)), [x, W], names=["x", "W"])
    assert report.skipped == ["x"]
    assert report.checked == ["W"]
    assert report.passed


def test_grad_check_catches_corrupted_backward():
    rng = np.random.default_rng(2)
    x = param(rng, 5)

    def broken_square(t):
        # forward t**2, backward claims 3t
        return Tensor(t.data**2, parents=(t,), backward_fn=lambda g: (g * 3 * t.data,))

    report = grad_check(lambda: weighted_sum(broken_square(x)), [x], names=["x"])
    assert not report.passed
    assert "x" in report.failures


# -- conv1d ------------------------------------------------------------------------


def test_conv1d_identity_kernel():
    x = Tensor(np.random.default_rng(3).normal(size=(1, 9)))
    k = Tensor(np.array([[[0.0, 1.0, 0.0]]]))
    y = ops.conv1d(x, k, padding="same")
    np.testing.assert_array_equal(y.data, x.data)


def test_conv1d_ones_kernel_hand_sum():
    y = ops.conv1d(Tensor(np.array([[1.0, 2.0, 3.0]])), Tensor(np.ones((1, 1, 3))), padding=1)
    np.testing.assert_array_equal(y.data, [[3.0, 6.0, 5.0]])


@pytest.mark.parametrize("length,k,stride,pad", [(10, 3, 1, 1), (11, 5, 2, 0), (7, 7, 1, 3), (9, 3, 3, 2)])
def test_conv1d_output_length(length, k, stride, pad):
    x = Tensor(np.zeros((2, length)))
    y = ops.conv1d(x, Tensor(np.zeros((4, 2, k))), stride=stride, padding=pad)
    assert y.shape == (4, (length + 2 * pad - k) // stride + 1)


def test_conv1d_matches_direct_loops():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(3, 12)), rng.normal(size=(2, 3, 5)), rng.normal(size=2)
    y = ops.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=2).data
    xp = np.pad(x, ((0, 0), (2, 2)))
    expect = np.zeros_like(y)
    for o in range(2):
        for j in range(y.shape[1]):
            expect[o, j] = b[o] + sum(
                w[o, c, i] * xp[c, 2 * j + i] for c in range(3) for i in range(5)
            )
    np.testing.assert_allclose(y, expect, atol=1e-12)


def test_conv1d_kernel_longer_than_input():
    with pytest.raises(ValueError, match="exceeds"):
        ops.conv1d(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 1, 7))), padding=1)


def test_conv1d_gradcheck_batched_per_group_weights():
    rng = np.random.default_rng(5)
    x = param(rng, 2, 3, 2, 11)  # [P, B, C_in, L]
    w = param(rng, 2, 1, 4, 2, 3)  # per-P kernels broadcast over B
    b = param(rng, 2, 1, 4)
    report = grad_check(
        lambda: weighted_sum(ops.conv1d(x, w, b, stride=2, padding="same")), [x, w, b], tol=1e-4
    )
    assert report.passed, report


# -- batchnorm / relu / maxpool ------------------------------------------------------


def cnn_tail(x, gamma, beta, state, training=True):
    return ops.maxpool1d(ops.relu(ops.batchnorm(x, gamma, beta, state, axes=(0, 2), training=training)), 3)


def test_block_tail_zero_input_gives_zero():
    state = BatchNormState.create((1, 4, 1), dtype=np.float64)
    y = cnn_tail(Tensor(np.zeros((5, 4, 9))), Tensor(np.ones((1, 4, 1))), Tensor(np.zeros((1, 4, 1))), state)
    np.testing.assert_array_equal(y.data, 0.0)


def test_maxpool_hand_example():
    y = ops.maxpool1d(Tensor(np.array([1.0, 5, 2, 0, 0, 7])), 3)
    np.testing.assert_array_equal(y.data, [5.0, 7.0])


def test_batchnorm_training_moments():
    rng = np.random.default_rng(6)
    x = rng.normal(loc=3.0, scale=5.0, size=(16, 3, 50))
    gamma, beta = np.array([0.5, 2.0, 1.5]).reshape(1, 3, 1), np.array([-1.0, 0.0, 4.0]).reshape(1, 3, 1)
    state = BatchNormState.create((1, 3, 1), dtype=np.float64)
    y = ops.batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), state, axes=(0, 2), training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2)), beta.ravel(), atol=1e-6)
    np.testing.assert_allclose(y.std(axis=(0, 2)), gamma.ravel(), atol=1e-3)


def test_batchnorm_eval_before_training_raises():
    state = BatchNormState.create((1, 2, 1))
    with pytest.raises(RuntimeError, match="uninitialized running stats"):
        ops.batchnorm(Tensor(np.zeros((3, 2, 4))), Tensor(np.ones((1, 2, 1))), Tensor(np.zeros((1, 2, 1))),
                      state, axes=(0, 2), training=False)


@pytest.mark.parametrize("training", [True, False])
def test_block_tail_gradcheck(training):
    rng = np.random.default_rng(7)
    x, gamma, beta = param(rng, 4, 3, 12), param(rng, 1, 3, 1), param(rng, 1, 3, 1)
    state = BatchNormState.create((1, 3, 1), dtype=np.float64)
    ops.batchnorm(Tensor(rng.normal(size=(4, 3, 12))), gamma, beta, state, axes=(0, 2), training=True)
    report = grad_check(lambda: weighted_sum(cnn_tail(x, gamma, beta, state, training)), [x, gamma, beta],
                        h=1e-6, tol=1e-4)
    assert report.passed, report


# -- global average pooling -------------------------------------------------------------


def test_gap_examples():
    np.testing.assert_array_equal(ops.global_average_pool(Tensor(np.ones((1, 22)))).data, [1.0])
    np.testing.assert_array_equal(ops.global_average_pool(Tensor(np.array([[0.0, 2.0]]))).data, [1.0])
    rng = np.random.default_rng(8)
    E = rng.normal(size=(64, 22))
    expect = [math.fsum(row) / 22 for row in E]
    np.testing.assert_allclose(ops.global_average_pool(Tensor(E)).data, expect, atol=1e-12)


# -- GRU ---------------------------------------------------------------------------------


def test_gru_zero_fixed_point():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(6, 4)))
    h = ops.gru(x, Tensor(np.zeros((4, 9))), Tensor(np.zeros((3, 9))), Tensor(np.zeros(9)),
                Tensor(np.zeros(3)))
    np.testing.assert_array_equal(h.data, 0.0)


def test_gru_scalar_hand_computation():
    wz, wr, wh = 0.5, -0.3, 0.8
    uz, ur, uh = 0.2, 0.7, -0.4
    bz, br, bh = 0.1, 0.0, -0.2
    x0, h0 = 1.5, 0.3

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    z = sig(wz * x0 + uz * h0 + bz)
    r = sig(wr * x0 + ur * h0 + br)
    cand = math.tanh(wh * x0 + uh * (r * h0) + bh)
    expect = (1 - z) * h0 + z * cand

    out = ops.gru(Tensor(np.array([[x0]])), Tensor(np.array([[wz, wr, wh]])),
                  Tensor(np.array([[uz, ur, uh]])), Tensor(np.array([bz, br, bh])),
                  Tensor(np.array([h0])))
    assert out.shape == (1, 1)
    assert out.data[0, 0] == pytest.approx(expect, abs=1e-15)


def test_gru_gradcheck_five_steps():
    rng = np.random.default_rng(10)
    H, F = 3, 4
    x = param(rng, 5, 2, F)
    W, U, b = param(rng, F, 3 * H, scale=0.5), param(rng, H, 3 * H, scale=0.5), param(rng, 3 * H, scale=0.5)
    h0 = param(rng, 2, H, scale=0.5)
    report = grad_check(lambda: weighted_sum(ops.gru(x, W, U, b, h0)), [x, W, U, b, h0], tol=1e-3)
    assert report.passed, report
    assert report.max_rel_error <= 1e-4


def test_gru_gradcheck_stacked_groups_and_shared_weights():
    rng = np.random.default_rng(11)
    x = param(rng, 2, 4, 3, 5)  # [P, T, N, in]
    W_shared = param(rng, 1, 5, 6, scale=0.5)
    U = param(rng, 2, 2, 6, scale=0.5)
    b = param(rng, 2, 6, scale=0.5)
    report = grad_check(lambda: weighted_sum(ops.gru(x, W_shared, U, b)), [x, W_shared, U, b], tol=1e-4)
    assert report.passed, report


def test_gru_nan_reports_step():
    x = np.zeros((4, 1))
    x[2, 0] = np.nan
    with pytest.raises(NonFiniteError):
        ops.gru(Tensor(x), Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), Tensor(np.zeros(3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_gru_hidden_states_bounded(T, F, H, seed):
    rng = np.random.default_rng(seed)
    h = ops.gru(Tensor(rng.normal(scale=10, size=(T, 3, F))), Tensor(rng.normal(scale=3, size=(F, 3 * H))),
                Tensor(rng.normal(scale=3, size=(H, 3 * H))), Tensor(rng.normal(size=3 * H)))
    assert np.all(np.abs(h.data) <= 1.0)


# -- attention ----------------------------------------------------------------------------


def attention_params(rng, d, dk, dout, scale=0.5):
    return [param(rng, d, dk, scale=scale), param(rng, d, dk, scale=scale), param(rng, d, d, scale=scale),
            param(rng, d, dout, scale=scale), param(rng, dout, scale=scale)]


def test_attention_single_step_is_value_plus_residual():
    rng = np.random.default_rng(12)
    R = Tensor(rng.normal(size=(1, 4)))
    Wq, Wk, Wv, WD, bD = attention_params(rng, 4, 3, 2)
    out = ops.self_attention_residual(R, Wq, Wk, Wv, WD, bD)
    assert out.weights.shape == (1, 1) and out.weights[0, 0] == 1.0
    expect = (R.data @ Wv.data + R.data)[0] @ WD.data + bD.data
    np.testing.assert_allclose(out.latent.data, expect, atol=1e-12)


def test_attention_zero_query_gives_uniform_rows():
    rng = np.random.default_rng(13)
    R = Tensor(rng.normal(size=(5, 4)))
    Wq, Wk, Wv, WD, bD = attention_params(rng, 4, 3, 2)
    Wq.data[:] = 0.0
    out = ops.self_attention_residual(R, Wq, Wk, Wv, WD, bD)
    np.testing.assert_allclose(out.weights, 1.0 / 5, atol=1e-15)


def test_attention_two_by_two_brute_force():
    R = np.array([[1.0, 0.5], [-0.5, 2.0]])
    Wq = np.array([[0.3, -0.2], [0.1, 0.4]])
    Wk = np.array([[0.5, 0.1], [-0.3, 0.2]])
    Wv = np.array([[1.0, 0.2], [0.0, -0.7]])
    WD = np.array([[0.6], [-0.4]])
    bD = np.array([0.05])
    # explicit scalar loops
    Q = [[sum(R[t][i] * Wq[i][j] for i in range(2)) for j in range(2)] for t in range(2)]
    K = [[sum(R[t][i] * Wk[i][j] for i in range(2)) for j in range(2)] for t in range(2)]
    V = [[sum(R[t][i] * Wv[i][j] for i in range(2)) for j in range(2)] for t in range(2)]
    A = []
    for t in range(2):
        s = [sum(Q[t][j] * K[u][j] for j in range(2)) / math.sqrt(2) for u in range(2)]
        e = [math.exp(v) for v in s]
        A.append([v / sum(e) for v in e])
    mixed = [[sum(A[t][u] * V[u][j] for u in range(2)) + R[t][j] for j in range(2)] for t in range(2)]
    pooled = [(mixed[0][j] + mixed[1][j]) / 2 for j in range(2)]
    expect = pooled[0] * WD[0][0] + pooled[1] * WD[1][0] + bD[0]

    out = ops.self_attention_residual(*(Tensor(a) for a in (R, Wq, Wk, Wv, WD, bD)))
    np.testing.assert_allclose(out.weights, A, atol=1e-14)
    assert out.latent.data[0] == pytest.approx(expect, abs=1e-14)


def test_attention_dk_mismatch():
    rng = np.random.default_rng(14)
    Wq, Wk, Wv, WD, bD = attention_params(rng, 4, 3, 2)
    with pytest.raises(ValueError, match="d_k mismatch"):
        ops.self_attention_residual(Tensor(np.zeros((2, 4))), Wq, param(rng, 4, 2), Wv, WD, bD)


def test_attention_gradcheck_batched():
    rng = np.random.default_rng(15)
    R = param(rng, 2, 3, 4, 5)
    ps = attention_params(rng, 5, 3, 2)
    report = grad_check(lambda: weighted_sum(ops.self_attention_residual(R, *ps).latent), [R, *ps], tol=1e-4)
    assert report.passed, report


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(T, seed):
    rng = np.random.default_rng(seed)
    A = ops.softmax(Tensor(rng.normal(scale=5, size=(3, T, T)).astype(np.float32)), axis=-1).data
    np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all((A > 0) & (A <= 1))


# -- loss ----------------------------------------------------------------------------------


def test_cross_entropy_examples():
    confident = Tensor(np.array([[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]]))
    assert float(ops.softmax_cross_entropy(confident, [0, 2]).data) <= 1e-9
    uniform = Tensor(np.zeros((4, 3)))
    assert float(ops.softmax_cross_entropy(uniform, [0, 1, 2, 0]).data) == pytest.approx(math.log(3), abs=1e-12)


def test_cross_entropy_gradcheck():
    rng = np.random.default_rng(16)
    logits = param(rng, 6, 3)
    labels = rng.integers(0, 3, size=6)
    report = grad_check(lambda: ops.softmax_cross_entropy(logits, labels), [logits], tol=1e-5)
    assert report.passed, report


# -- misc shape ops ----------------------------------------------------------------------------


def test_shape_ops_gradcheck():
    rng = np.random.default_rng(17)
    a, b = param(rng, 2, 3, 4), param(rng, 2, 5, 4)

    def f():
        c = ops.concat([a, b], axis=1)
        d = ops.transpose(c, (2, 0, 1))
        e = ops.sigmoid(ops.tanh(ops.reshape(d, (4, 16))))
        return weighted_sum(ops.mean(e, axis=0))

    report = grad_check(f, [a, b], tol=1e-6)
    assert report.passed, report


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_dense_gradcheck_random_shapes(batch, n_in, n_out, seed):
    rng = np.random.default_rng(seed)
    x, W, b = param(rng, batch, n_in), param(rng, n_in, n_out), param(rng, n_out)
    report = grad_check(lambda: weighted_sum(ops.relu(ops.dense(x, W, b))), [x, W, b], h=1e-6, tol=1e-4)
    assert report.passed, report


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(18)
    R = Tensor(rng.normal(size=(7, 6)).astype(np.float32))
    ps = [Tensor(p.data.astype(np.float32)) for p in attention_params(rng, 6, 6, 3)]
    a = ops.self_attention_residual(R, *ps)
    b = ops.self_attention_residual(R, *ps)
    assert a.latent.data.tobytes() == b.latent.data.tobytes()
