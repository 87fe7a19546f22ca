"""Tensor op semantics against independent oracles, plus autodiff checks."""

import numpy as np
import pytest

from scd import tensor as T
from scd.verify import finite_difference_check


# ---------------------------------------------------------------- matmul


def matmul_oracle(a, b):
    """Index triple loop, no BLAS."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def test_matmul_identity(rng):
    b = T.Tensor(rng.standard_normal((2, 2)))
    eye = T.Tensor(np.eye(2))
    np.testing.assert_array_equal(T.matmul(eye, b).data, b.data)


def test_matmul_zeros():
    out = T.matmul(T.zeros((3, 4)), T.ones((4, 2)))
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_matmul_against_triple_loop(f64, rng):
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    assert np.max(np.abs(got - matmul_oracle(a, b))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(T.TensorError):
        T.matmul(T.zeros((2, 3)), T.zeros((4, 2)))


def test_matmul_batched_broadcast(f64, rng):
    a = rng.standard_normal((4, 2, 5, 7))
    b = rng.standard_normal((7, 3))
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    for i in range(4):
        for j in range(2):
            assert np.max(np.abs(got[i, j] - matmul_oracle(a[i, j], b))) < 1e-12


# ---------------------------------------------------------------- conv2d


def conv2d_oracle(x, w, stride, pad):
    """Direct six-nested-loop cross-correlation."""
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, o, ho, wo), dtype=x.dtype)
    for bi in range(bsz):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[bi, ci, yi * stride + ki, xi * stride + kj] * w[oi, ci, ki, kj]
                    out[bi, oi, yi, xi] = acc
    return out


def test_conv2d_identity_kernel(rng):
    x = T.Tensor(rng.standard_normal((1, 1, 4, 4)))
    w = T.ones((1, 1, 1, 1))
    np.testing.assert_array_equal(T.conv2d(x, w).data, x.data)


def test_conv2d_zero_weights(rng):
    x = T.Tensor(rng.standard_normal((2, 3, 5, 5)))
    out = T.conv2d(x, T.zeros((4, 3, 3, 3)), stride=1, pad=1)
    np.testing.assert_array_equal(out.data, np.zeros((2, 4, 5, 5)))


def test_conv2d_against_nested_loops(f64, rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    got = T.conv2d(T.Tensor(x), T.Tensor(w), stride=1, pad=1).data
    assert np.max(np.abs(got - conv2d_oracle(x, w, 1, 1))) < 1e-12


def test_conv2d_strided_against_nested_loops(f64, rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 4, 4))
    got = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, pad=1).data
    assert np.max(np.abs(got - conv2d_oracle(x, w, 2, 1))) < 1e-12


def test_conv2d_non_integral_output():
    with pytest.raises(T.TensorError):
        T.conv2d(T.zeros((1, 1, 5, 5)), T.zeros((1, 1, 2, 2)), stride=2, pad=0)


# ---------------------------------------------------------------- softmax


def test_softmax_constant_row():
    out = T.softmax_lastaxis(T.Tensor([3.0, 3.0, 3.0, 3.0]))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], rtol=0, atol=1e-7)


def test_softmax_large_logits_no_overflow():
    out = T.softmax_lastaxis(T.Tensor([1000.0, 1000.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=0, atol=1e-7)


def test_softmax_against_formula(f64):
    out = T.softmax_lastaxis(T.Tensor([0.0, 1.0, 2.0])).data
    xs = np.array([0.0, 1.0, 2.0], dtype=np.longdouble)
    want = np.exp(xs) / np.exp(xs).sum()
    assert np.max(np.abs(out - want.astype(np.float64))) < 1e-12


def test_softmax_rows_sum_to_one(f64, rng):
    x = T.Tensor(rng.standard_normal((4, 6, 9)))
    p = T.softmax_lastaxis(x).data
    np.testing.assert_allclose(p.sum(axis=-1), np.ones((4, 6)), atol=1e-6)


def test_softmax_shift_invariance(f64, rng):
    x = rng.standard_normal((3, 8))
    a = T.softmax_lastaxis(T.Tensor(x)).data
    b = T.softmax_lastaxis(T.Tensor(x + 137.5)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_fully_masked_row_is_error():
    mask = np.full((1, 3), -np.inf)
    with pytest.raises(T.TensorError):
        T.softmax_lastaxis(T.Tensor(np.zeros((1, 3))), mask=mask)


def test_softmax_masked_columns_exact_zero(f64):
    mask = np.array([0.0, -np.inf, 0.0])
    p = T.softmax_lastaxis(T.Tensor([1.0, 5.0, 2.0]), mask=mask).data
    assert p[1] == 0.0
    np.testing.assert_allclose(p.sum(), 1.0, atol=1e-12)


# ---------------------------------------------------------------- group_norm


def test_group_norm_constant_input_is_zero():
    x = T.Tensor(np.full((2, 4, 3, 3), 7.0))
    out = T.group_norm(x, 2, T.ones((4,)), T.zeros((4,)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-5)


def test_group_norm_gamma_zero_gives_beta(rng):
    x = T.Tensor(rng.standard_normal((1, 4, 5, 5)))
    beta = T.Tensor([1.0, -2.0, 0.5, 3.0])
    out = T.group_norm(x, 4, T.zeros((4,)), beta)
    want = np.broadcast_to(beta.data.reshape(1, 4, 1, 1), out.shape)
    np.testing.assert_array_equal(out.data, want)


def test_group_norm_statistics(f64, rng):
    x = T.Tensor(rng.standard_normal((3, 8, 6, 6)) * 2.5 + 1.0)
    out = T.group_norm(x, 4, T.ones((8,)), T.zeros((8,)), eps=1e-12).data
    g = out.reshape(3, 4, 2, 6, 6)
    mu = g.mean(axis=(2, 3, 4))
    var = g.var(axis=(2, 3, 4))
    assert np.max(np.abs(mu)) < 1e-10
    assert np.max(np.abs(var - 1.0)) < 1e-6


def test_group_norm_divisibility_error():
    with pytest.raises(T.TensorError):
        T.group_norm(T.zeros((1, 6, 2, 2)), 4, T.ones((6,)), T.zeros((6,)))


# ---------------------------------------------------------------- elementwise suite


def test_concat_slice_roundtrip_bit_exact(rng):
    a = T.Tensor(rng.standard_normal((1, 1, 2, 2)))
    b = T.Tensor(rng.standard_normal((1, 1, 2, 3)))
    j = T.concat([a, b], axis=3)
    assert j.shape == (1, 1, 2, 5)
    np.testing.assert_array_equal(T.slice_axis(j, 3, 0, 2).data, a.data)
    np.testing.assert_array_equal(T.slice_axis(j, 3, 2, 5).data, b.data)


def test_silu_zero():
    assert T.silu(T.Tensor(0.0)).item() == 0.0


def test_mean_hand_value():
    assert T.mean(T.Tensor([1.0, 2.0, 3.0, 4.0])).item() == 2.5


def test_concat_axis_out_of_range():
    with pytest.raises(T.TensorError):
        T.concat([T.zeros((2, 2)), T.zeros((2, 2))], axis=5)


def test_concat_incompatible_shapes():
    with pytest.raises(T.TensorError):
        T.concat([T.zeros((2, 2)), T.zeros((3, 3))], axis=0)


def test_add_rejects_implicit_broadcast():
    with pytest.raises(T.TensorError):
        T.add(T.zeros((2, 3)), T.zeros((3,)))


def test_expand_explicit_broadcast(rng):
    x = T.Tensor(rng.standard_normal((2, 3, 1, 1)))
    out = T.expand(x, (2, 3, 4, 5))
    assert out.shape == (2, 3, 4, 5)
    np.testing.assert_array_equal(out.data[:, :, 2, 4], x.data[:, :, 0, 0])


def test_nonfinite_output_raises():
    with pytest.raises(T.NonFiniteError):
        T.Tensor([np.inf, 1.0])


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones(rng):
    x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    T.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=x.dtype))


def test_backward_quadratic_gives_x(f64, rng):
    x = T.Tensor(rng.standard_normal((5,)), requires_grad=True)
    loss = T.scale(T.sum_all(T.mul(x, x)), 0.5)
    loss.backward()
    np.testing.assert_allclose(x.grad, x.data, atol=1e-12)


def test_backward_requires_scalar(rng):
    x = T.Tensor(rng.standard_normal((3,)), requires_grad=True)
    with pytest.raises(T.TensorError):
        T.mul(x, x).backward()


def test_backward_accumulates(f64):
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.sum_all(x).backward()
    T.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    T.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


@pytest.mark.parametrize(
    "name",
    ["matmul", "conv2d", "softmax", "group_norm", "silu", "linear", "concat_slice",
     "upsample", "attn_weighted_sum", "expand", "permute"],
)
def test_per_op_finite_differences(f64, rng, name):
    if name == "matmul":
        inputs = [T.Tensor(rng.standard_normal((3, 4)), requires_grad=True),
                  T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)]
        fn = lambda xs: T.sum_all(T.silu(T.matmul(xs[0], xs[1])))
    elif name == "conv2d":
        inputs = [T.Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True),
                  T.Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True),
                  T.Tensor(rng.standard_normal((3,)), requires_grad=True)]
        fn = lambda xs: T.sum_all(T.silu(T.conv2d(xs[0], xs[1], xs[2], stride=2, pad=1)))
    elif name == "softmax":
        inputs = [T.Tensor(rng.standard_normal((3, 5)), requires_grad=True)]
        w = rng.standard_normal((3, 5))
        fn = lambda xs: T.sum_all(T.mul(T.softmax_lastaxis(xs[0]), T.Tensor(w)))
    elif name == "group_norm":
        inputs = [T.Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True),
                  T.Tensor(rng.standard_normal((4,)), requires_grad=True),
                  T.Tensor(rng.standard_normal((4,)), requires_grad=True)]
        w = rng.standard_normal((2, 4, 3, 3))
        fn = lambda xs: T.sum_all(T.mul(T.group_norm(xs[0], 2, xs[1], xs[2]), T.Tensor(w)))
    elif name == "silu":
        inputs = [T.Tensor(rng.standard_normal((7,)), requires_grad=True)]
        fn = lambda xs: T.sum_all(T.mul(T.silu(xs[0]), T.silu(xs[0])))
    elif name == "linear":
        inputs = [T.Tensor(rng.standard_normal((4, 3)), requires_grad=True),
                  T.Tensor(rng.standard_normal((3, 5)), requires_grad=True),
                  T.Tensor(rng.standard_normal((5,)), requires_grad=True)]
        fn = lambda xs: T.mean(T.silu(T.linear(xs[0], xs[1], xs[2])))
    elif name == "concat_slice":
        inputs = [T.Tensor(rng.standard_normal((2, 3)), requires_grad=True),
                  T.Tensor(rng.standard_normal((2, 2)), requires_grad=True)]
        fn = lambda xs: T.sum_all(T.silu(T.slice_axis(T.concat(xs, axis=1), 1, 1, 4)))
    elif name == "upsample":
        inputs = [T.Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)]
        w = rng.standard_normal((1, 2, 6, 6))
        fn = lambda xs: T.sum_all(T.mul(T.upsample_nearest(xs[0]), T.Tensor(w)))
    elif name == "attn_weighted_sum":
        p0 = rng.random((2, 3, 4))
        inputs = [T.Tensor(p0 / p0.sum(-1, keepdims=True), requires_grad=True),
                  T.Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)]
        fn = lambda xs: T.sum_all(T.silu(T.attn_weighted_sum(xs[0], xs[1])))
    elif name == "expand":
        inputs = [T.Tensor(rng.standard_normal((2, 3, 1)), requires_grad=True)]
        w = rng.standard_normal((2, 3, 4))
        fn = lambda xs: T.sum_all(T.mul(T.expand(xs[0], (2, 3, 4)), T.Tensor(w)))
    else:  # permute
        inputs = [T.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)]
        w = rng.standard_normal((4, 2, 3))
        fn = lambda xs: T.sum_all(T.mul(T.permute(xs[0], (2, 0, 1)), T.Tensor(w)))
    err = finite_difference_check(fn, inputs, rng, n_coords=100)
    assert err < 1e-4, f"{name}: max rel err {err}"


def test_determinism_same_seed_bit_identical():
    def run():
        r = np.random.default_rng(99)
        x = T.Tensor(r.standard_normal((2, 3, 8, 8)))
        w = T.Tensor(r.standard_normal((4, 3, 3, 3)))
        return T.softmax_lastaxis(T.reshape(T.conv2d(x, w, pad=1), (2, -1))).data

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


def test_precision_switch_controls_dtype():
    assert T.Tensor([1.0]).dtype == np.float32
    with T.precision("f64"):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32


def test_no_grad_blocks_graph(rng):
    x = T.Tensor(rng.standard_normal((3,)), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad
