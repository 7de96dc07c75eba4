import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrsynth.gradcheck import check_gradients, numerical_grad, relative_error
from mrsynth.tensor import (
    EmptyMaskError,
    Tensor,
    add,
    backward,
    concat,
    conv2d,
    masked_rmse,
    maxpool2d,
    no_grad,
    prelu,
    rmse,
    upsample_nearest,
)

from oracles import conv2d_oracle, masked_rmse_oracle, maxpool_oracle


def f64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ------------------------------------------------------------------ conv2d


def test_conv_identity_kernel(rng):
    x = f64(rng.normal(size=(1, 6, 7)))
    y = conv2d(x, f64(np.ones((1, 1, 1, 1))), f64(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_averaging_constant_interior():
    x = f64(np.full((1, 6, 6), 2.5))
    y = conv2d(x, f64(np.full((1, 1, 3, 3), 1 / 9)), f64(np.zeros(1)), pad=1)
    np.testing.assert_allclose(y.data[0, 1:-1, 1:-1], 2.5, rtol=1e-12)


def test_conv_matches_direct_summation(rng):
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y = conv2d(f64(x), f64(w), f64(b), pad=1)
    ref = conv2d_oracle(x, w, b, pad=1)
    np.testing.assert_allclose(y.data, ref, rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)])
def test_conv_strides_and_padding(rng, stride, pad, k):
    x = rng.normal(size=(2, 7, 7))
    w = rng.normal(size=(2, 2, k, k))
    y = conv2d(f64(x), f64(w), None, stride=stride, pad=pad)
    np.testing.assert_allclose(y.data, conv2d_oracle(x, w, None, stride, pad), rtol=1e-6, atol=1e-12)


def test_conv_batched_equals_per_sample(rng):
    x = rng.normal(size=(3, 2, 6, 6))
    w, b = f64(rng.normal(size=(4, 2, 3, 3))), f64(rng.normal(size=4))
    y = conv2d(f64(x), w, b, pad=1)
    for n in range(3):
        np.testing.assert_allclose(y.data[n], conv2d(f64(x[n]), w, b, pad=1).data, rtol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        conv2d(f64(np.zeros((2, 4, 4))), f64(np.zeros((1, 3, 3, 3))))


def test_conv_rejects_non_integral_output():
    with pytest.raises(ValueError, match="integral"):
        conv2d(f64(np.zeros((1, 6, 6))), f64(np.zeros((1, 1, 3, 3))), stride=2)


def test_conv_rejects_even_kernel():
    with pytest.raises(ValueError, match="odd"):
        conv2d(f64(np.zeros((1, 6, 6))), f64(np.zeros((1, 1, 2, 2))))


# ----------------------------------------------------------------- maxpool


def test_maxpool_constant():
    y = maxpool2d(f64(np.full((2, 4, 6), 3.0)))
    np.testing.assert_array_equal(y.data, np.full((2, 2, 3), 3.0))


def test_maxpool_ramp_takes_bottom_right():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    y, idx = maxpool2d(f64(x), return_indices=True)
    np.testing.assert_array_equal(y.data, [[[5, 7], [13, 15]]])
    assert np.all(idx == 3)


def test_maxpool_ties_pick_first_in_row_major_order():
    x = f64(np.ones((1, 2, 2)), grad=True)
    y, idx = maxpool2d(x, return_indices=True)
    assert idx[0, 0, 0] == 0
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [[[1, 0], [0, 0]]])


def test_maxpool_matches_oracle_and_routes_gradient(rng):
    x = f64(rng.normal(size=(3, 8, 8)), grad=True)
    y = maxpool2d(x)
    np.testing.assert_array_equal(y.data, maxpool_oracle(x.data))
    up = rng.normal(size=y.shape)
    (y * f64(up)).sum().backward()
    windows = x.grad.reshape(3, 4, 2, 4, 2).transpose(0, 1, 3, 2, 4).reshape(3, 4, 4, 4)
    assert np.all(np.count_nonzero(windows, axis=-1) == 1)
    np.testing.assert_allclose(windows.sum(axis=-1), up)
    assert check_gradients(lambda: (maxpool2d(x) * f64(up)).sum(), [x]) <= 1e-4


def test_maxpool_rejects_odd_extent():
    with pytest.raises(ValueError):
        maxpool2d(f64(np.zeros((1, 5, 4))))


# ---------------------------------------------------------------- upsample


def test_upsample_single_pixel():
    y = upsample_nearest(f64([[[4.0]]]))
    np.testing.assert_array_equal(y.data, np.full((1, 2, 2), 4.0))


def test_upsample_sum_gradient_is_four(rng):
    x = f64(rng.normal(size=(2, 3, 3)), grad=True)
    upsample_nearest(x).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full((2, 3, 3), 4.0))
    numeric = numerical_grad(lambda: upsample_nearest(x).sum(), x)
    np.testing.assert_allclose(numeric, 4.0, rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_maxpool_inverts_upsample(x):
    np.testing.assert_array_equal(maxpool2d(upsample_nearest(f64(x))).data, x)


# ------------------------------------------------------------------- prelu


def test_prelu_cases():
    slope = f64([0.25])
    np.testing.assert_array_equal(prelu(f64([[[0.0, 1.0, 3.0]]]), slope).data, [[[0.0, 1.0, 3.0]]])
    np.testing.assert_array_equal(prelu(f64([[[-1.0, 2.0]]]), f64([0.0])).data, [[[0.0, 2.0]]])
    assert prelu(f64([[[-2.0]]]), slope).data.item() == -0.5


def test_prelu_rejects_wrong_slope_count():
    with pytest.raises(ValueError):
        prelu(f64(np.zeros((3, 2, 2))), f64(np.zeros(2)))


# ---------------------------------------------------------------- backward


def test_backward_sum_is_ones(rng):
    x = f64(rng.normal(size=(2, 3)), grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square(rng):
    x = f64(rng.normal(size=(4,)), grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar(rng):
    x = f64(rng.normal(size=(2,)), grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_add_routes_identical_gradient_to_both_addends(rng):
    a = f64(rng.normal(size=(2, 3, 3)), grad=True)
    b = f64(rng.normal(size=(2, 3, 3)), grad=True)
    w = f64(rng.normal(size=(2, 3, 3)))
    (add(a, b) * w).sum().backward()
    np.testing.assert_array_equal(a.grad, b.grad)


def test_fan_out_accumulates(rng):
    x = f64(rng.normal(size=(3,)), grad=True)
    (x + x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, 4.0)


def test_no_grad_records_nothing(rng):
    x = f64(rng.normal(size=(1, 4, 4)), grad=True)
    with no_grad():
        y = maxpool2d(x)
    assert not y.requires_grad


def test_chain_loss_matches_finite_differences(rng):
    x = f64(rng.normal(size=(3, 8, 8)), grad=True)
    w = f64(rng.normal(size=(3, 3, 3, 3)) * 0.3, grad=True)
    b = f64(rng.normal(size=3) * 0.1, grad=True)
    slope = f64([0.25, 0.1, 0.4], grad=True)
    target = rng.normal(size=(3, 4, 4))
    mask = (rng.random((1, 4, 4)) > 0.3).astype(float)
    mask[0, 0, 0] = 1

    def loss():
        return masked_rmse(maxpool2d(prelu(conv2d(x, w, b, pad=1), slope)), target, mask)

    assert check_gradients(loss, [x, w, b, slope]) <= 1e-4


@pytest.mark.parametrize(
    "name",
    ["conv2d", "conv2d_stride", "maxpool2d", "upsample", "prelu", "prelu_shared", "masked_rmse", "concat", "batched_rmse"],
)
def test_gradient_check_each_op(rng, name):
    x = f64(rng.normal(size=(2, 6, 6)), grad=True)
    proj = f64(rng.normal(size=(64,)))

    def project(t):
        flat = t.reshape(-1)
        return (flat * f64(proj.data[: flat.size] if flat.size <= 64 else np.resize(proj.data, flat.size))).sum()

    if name == "conv2d":
        w, b = f64(rng.normal(size=(3, 2, 3, 3)), grad=True), f64(rng.normal(size=3), grad=True)
        fn, ts = (lambda: project(conv2d(x, w, b, pad=1))), [x, w, b]
    elif name == "conv2d_stride":
        x7 = f64(rng.normal(size=(2, 7, 7)), grad=True)
        w = f64(rng.normal(size=(2, 2, 3, 3)), grad=True)
        fn, ts = (lambda: project(conv2d(x7, w, None, stride=2, pad=1))), [x7, w]
    elif name == "maxpool2d":
        fn, ts = (lambda: project(maxpool2d(x))), [x]
    elif name == "upsample":
        fn, ts = (lambda: project(upsample_nearest(x))), [x]
    elif name == "prelu":
        s = f64([0.25, -0.3], grad=True)
        fn, ts = (lambda: project(prelu(x, s))), [x, s]
    elif name == "prelu_shared":
        s = f64([0.1], grad=True)
        fn, ts = (lambda: project(prelu(x, s))), [x, s]
    elif name == "masked_rmse":
        p = f64(rng.normal(size=(3, 6, 6)), grad=True)
        t = rng.normal(size=(3, 6, 6))
        m = (rng.random((1, 6, 6)) > 0.5).astype(float)
        m[0, 0, 0] = 1
        fn, ts = (lambda: masked_rmse(p, t, m)), [p]
    elif name == "concat":
        y = f64(rng.normal(size=(1, 6, 6)), grad=True)
        fn, ts = (lambda: project(concat([x, y], axis=0))), [x, y]
    else:
        p = f64(rng.normal(size=(2, 3, 4, 4)), grad=True)
        t = rng.normal(size=(2, 3, 4, 4))
        m = np.ones((2, 1, 4, 4))
        m[1, 0, :2] = 0
        fn, ts = (lambda: masked_rmse(p, t, m)), [p]
    assert check_gradients(fn, ts, h=1e-5) <= 1e-4


# ------------------------------------------------------------ masked_rmse


def test_masked_rmse_zero_when_equal(rng):
    p = rng.normal(size=(3, 4, 4))
    assert masked_rmse(f64(p), p, np.ones((1, 4, 4))).item() == 0.0


def test_masked_rmse_zero_has_zero_gradient(rng):
    p = f64(rng.normal(size=(3, 4, 4)), grad=True)
    masked_rmse(p, p.data.copy(), np.ones((1, 4, 4))).backward()
    np.testing.assert_array_equal(p.grad, 0.0)


def test_masked_rmse_constant_residual(rng):
    t = rng.normal(size=(3, 5, 5))
    assert masked_rmse(f64(t + 0.1), t, np.ones((1, 5, 5))).item() == pytest.approx(0.1, abs=1e-12)


def test_masked_rmse_matches_loop_oracle(rng):
    p, t = rng.normal(size=(3, 6, 6)), rng.normal(size=(3, 6, 6))
    m = np.zeros((1, 6, 6))
    m[0, :, :3] = 1
    rng.shuffle(m.reshape(-1))
    assert masked_rmse(f64(p), t, m).item() == pytest.approx(masked_rmse_oracle(p, t, m), abs=1e-6)


def test_masked_rmse_all_ones_equals_unmasked(rng):
    p, t = rng.normal(size=(3, 5, 5)), rng.normal(size=(3, 5, 5))
    direct = np.sqrt(np.mean((p - t) ** 2))
    assert masked_rmse(f64(p), t, np.ones((1, 5, 5))).item() == pytest.approx(direct, abs=1e-7)
    assert rmse(f64(p), t).item() == pytest.approx(direct, abs=1e-7)


def test_masked_rmse_empty_mask_rejected():
    with pytest.raises(EmptyMaskError, match="empty brain mask"):
        masked_rmse(f64(np.ones((3, 2, 2))), np.zeros((3, 2, 2)), np.zeros((1, 2, 2)))


# ------------------------------------------------------------ determinism


def test_ops_are_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)

    def run():
        y = maxpool2d(prelu(conv2d(Tensor(x), Tensor(w), None, pad=1), Tensor(np.full(4, 0.25))))
        return upsample_nearest(y).data.tobytes()

    assert run() == run()


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9]))[0] < 1e-2
