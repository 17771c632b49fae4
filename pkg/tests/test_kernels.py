"""Tests for the dense tensor kernels, pinned against independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snowseg.errors import ConfigurationError, DataError, DimensionError
from snowseg.kernels import (
    ConvParams,
    conv2d_backward,
    conv2d_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    sgd_step,
    softmax_ce_loss,
    transposed_conv2d_backward,
    transposed_conv2d_forward,
    zero_velocity,
)

from oracles import (
    conv2d_loops,
    finite_difference,
    max_relative_error,
    maxpool2_loops,
)

FD_STEP = 1e-5
FD_RTOL = 1e-4


def rand_tensor(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape)


class TestConv2dForward:
    def test_scalar_product(self):
        x = np.full((1, 1, 1, 1), 3.0)
        p = ConvParams(kernel=np.full((1, 1, 1, 1), 2.0), bias=np.zeros(1))
        assert conv2d_forward(x, p)[0, 0, 0, 0] == 6.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rand_tensor(rng, (2, 3, 5, 4))
        p = ConvParams(kernel=np.eye(3).reshape(3, 3, 1, 1), bias=np.zeros(3))
        np.testing.assert_array_equal(conv2d_forward(x, p), x)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rand_tensor(rng, (1, 2, 5, 5))
        kernel = rand_tensor(rng, (3, 2, 3, 3))
        bias = rand_tensor(rng, (3,))
        p = ConvParams(kernel=kernel, bias=bias, stride=1, padding=1)
        got = conv2d_forward(x, p)
        want = conv2d_loops(x, kernel, bias, stride=1, pad=1)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_oracle_random_configs(self, seed):
        rng = np.random.default_rng(100 + seed)
        n, c_in, c_out = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        kh, kw = rng.integers(1, 4), rng.integers(1, 4)
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 3))
        oh, ow = rng.integers(1, 4), rng.integers(1, 4)
        h = (oh - 1) * stride + kh - 2 * pad
        w = (ow - 1) * stride + kw - 2 * pad
        if h < 1 or w < 1:
            pytest.skip("degenerate size draw")
        x = rand_tensor(rng, (n, c_in, h, w))
        kernel = rand_tensor(rng, (c_out, c_in, kh, kw))
        bias = rand_tensor(rng, (c_out,))
        p = ConvParams(kernel=kernel, bias=bias, stride=stride, padding=pad)
        np.testing.assert_allclose(
            conv2d_forward(x, p), conv2d_loops(x, kernel, bias, stride, pad),
            rtol=0, atol=1e-12,
        )

    def test_channel_mismatch_names_both_shapes(self):
        x = np.zeros((1, 2, 4, 4))
        p = ConvParams(kernel=np.zeros((1, 3, 3, 3)), bias=np.zeros(1))
        with pytest.raises(DimensionError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            conv2d_forward(x, p)

    def test_non_integral_output_size(self):
        x = np.zeros((1, 1, 5, 5))
        p = ConvParams(kernel=np.zeros((1, 1, 2, 2)), bias=np.zeros(1), stride=2)
        with pytest.raises(ConfigurationError):
            conv2d_forward(x, p)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        x = rand_tensor(rng, (1, 2, 6, 6))
        p = ConvParams(kernel=rand_tensor(rng, (3, 2, 3, 3)), bias=rand_tensor(rng, (3,)), padding=1)
        a = conv2d_forward(x, p)
        b = conv2d_forward(x, p)
        assert np.array_equal(a, b)


class TestConv2dBackward:
    def test_zero_cotangent(self):
        rng = np.random.default_rng(3)
        x = rand_tensor(rng, (1, 2, 4, 4))
        p = ConvParams(kernel=rand_tensor(rng, (2, 2, 3, 3)), bias=np.zeros(2), padding=1)
        gx, gk, gb = conv2d_backward(x, p, np.zeros((1, 2, 4, 4)))
        assert not gx.any() and not gk.any() and not gb.any()

    def test_scalar_chain_rule(self):
        x = np.full((1, 1, 1, 1), 3.0)
        p = ConvParams(kernel=np.full((1, 1, 1, 1), 2.0), bias=np.zeros(1))
        gx, gk, gb = conv2d_backward(x, p, np.ones((1, 1, 1, 1)))
        assert gx[0, 0, 0, 0] == 2.0
        assert gk[0, 0, 0, 0] == 3.0
        assert gb[0] == 1.0

    def test_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rand_tensor(rng, (1, 2, 4, 5))
        kernel = rand_tensor(rng, (3, 2, 3, 3))
        bias = rand_tensor(rng, (3,))
        p = ConvParams(kernel=kernel, bias=bias, stride=1, padding=1)
        g = rand_tensor(rng, conv2d_forward(x, p).shape)
        gx, gk, gb = conv2d_backward(x, p, g)

        fd_x = finite_difference(
            lambda v: float((g * conv2d_forward(v, p)).sum()), x.copy(), FD_STEP)
        fd_k = finite_difference(
            lambda v: float((g * conv2d_forward(x, ConvParams(v, bias, 1, 1))).sum()),
            kernel.copy(), FD_STEP)
        fd_b = finite_difference(
            lambda v: float((g * conv2d_forward(x, ConvParams(kernel, v, 1, 1))).sum()),
            bias.copy(), FD_STEP)
        assert max_relative_error(gx, fd_x) < FD_RTOL
        assert max_relative_error(gk, fd_k) < FD_RTOL
        assert max_relative_error(gb, fd_b) < FD_RTOL

    def test_grad_out_shape_mismatch(self):
        x = np.zeros((1, 1, 4, 4))
        p = ConvParams(kernel=np.zeros((1, 1, 3, 3)), bias=np.zeros(1), padding=1)
        with pytest.raises(DimensionError):
            conv2d_backward(x, p, np.zeros((1, 1, 3, 3)))


class TestMaxpool2:
    def test_distinct_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y, arg = maxpool2_forward(x)
        assert y[0, 0, 0, 0] == 4.0
        assert arg[0, 0, 0, 0] == 3  # bottom-right in row-major window order

    def test_tie_breaks_to_first_row_major(self):
        x = np.full((1, 1, 2, 2), 5.0)
        y, arg = maxpool2_forward(x)
        assert y[0, 0, 0, 0] == 5.0
        assert arg[0, 0, 0, 0] == 0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(5)
        x = rand_tensor(rng, (1, 3, 8, 8))
        y, arg = maxpool2_forward(x)
        want_y, want_arg = maxpool2_loops(x)
        np.testing.assert_array_equal(y, want_y)
        np.testing.assert_array_equal(arg, want_arg)

    def test_odd_dims_rejected(self):
        with pytest.raises(DimensionError):
            maxpool2_forward(np.zeros((1, 1, 3, 4)))

    def test_backward_routes_to_argmax(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        _, arg = maxpool2_forward(x)
        gx = maxpool2_backward(arg, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(gx.reshape(2, 2), [[0, 0], [0, 1]])

    def test_backward_zero(self):
        rng = np.random.default_rng(6)
        _, arg = maxpool2_forward(rand_tensor(rng, (2, 2, 4, 4)))
        assert not maxpool2_backward(arg, np.zeros((2, 2, 2, 2))).any()

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rand_tensor(rng, (1, 2, 4, 4))
        _, arg = maxpool2_forward(x)
        g = rand_tensor(rng, (1, 2, 2, 2))
        gx = maxpool2_backward(arg, g)
        fd = finite_difference(
            lambda v: float((g * maxpool2_forward(v)[0]).sum()), x.copy(), FD_STEP)
        assert max_relative_error(gx, fd) < FD_RTOL

    def test_all_ones_cotangent_conserves_window_count(self):
        rng = np.random.default_rng(8)
        x = rand_tensor(rng, (2, 3, 6, 8))
        y, arg = maxpool2_forward(x)
        gx = maxpool2_backward(arg, np.ones_like(y))
        assert gx.sum() == y.size


class TestRelu:
    def test_basic(self):
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
        np.testing.assert_array_equal(relu_forward(x).reshape(-1), [0.0, 0.0, 2.0])

    def test_identity_on_positive(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(0.1, 1.0, size=(1, 2, 3, 3))
        np.testing.assert_array_equal(relu_forward(x), x)

    def test_backward_finite_differences_away_from_zero(self):
        rng = np.random.default_rng(10)
        x = rand_tensor(rng, (1, 2, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5  # keep the kink out of the difference stencil
        g = rand_tensor(rng, x.shape)
        gx = relu_backward(x, g)
        fd = finite_difference(lambda v: float((g * relu_forward(v)).sum()), x.copy(), FD_STEP)
        assert max_relative_error(gx, fd) < FD_RTOL

    def test_subgradient_zero_at_zero(self):
        x = np.zeros((1, 1, 1, 1))
        assert relu_backward(x, np.ones_like(x))[0, 0, 0, 0] == 0.0


class TestTransposedConv2d:
    def test_single_input_pixel(self):
        x = np.full((1, 1, 1, 1), 5.0)
        p = ConvParams(kernel=np.ones((1, 1, 2, 2)), bias=np.zeros(1), stride=2)
        y = transposed_conv2d_forward(x, p)
        assert y.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(y, np.full((1, 1, 2, 2), 5.0))

    def test_shape_arithmetic(self):
        x = np.zeros((1, 1, 4, 4))
        p = ConvParams(kernel=np.zeros((1, 1, 4, 4)), bias=np.zeros(1), stride=2, padding=1)
        assert transposed_conv2d_forward(x, p).shape == (1, 1, 8, 8)

    @pytest.mark.parametrize("seed", range(6))
    def test_adjoint_of_convolution(self, seed):
        # forward must equal the convolution input gradient fed the same
        # cotangent, computed by the stuff-and-flip route
        rng = np.random.default_rng(200 + seed)
        n = int(rng.integers(1, 3))
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, min(k, 3)))
        h = int(rng.integers(1, 4))
        if (h - 1) * stride + k - 2 * pad < 1:
            pytest.skip("degenerate size draw")
        x = rand_tensor(rng, (n, c_in, h, h))
        kernel = rand_tensor(rng, (c_in, c_out, k, k))
        p_t = ConvParams(kernel=kernel, bias=np.zeros(c_out), stride=stride, padding=pad)
        y = transposed_conv2d_forward(x, p_t)

        p_c = ConvParams(kernel=kernel, bias=np.zeros(c_in), stride=stride, padding=pad)
        dummy = np.zeros_like(y)
        grad_x, _, _ = conv2d_backward(dummy, p_c, x)
        np.testing.assert_allclose(y, grad_x, rtol=0, atol=1e-12)

    def test_backward_zero_cotangent(self):
        rng = np.random.default_rng(11)
        x = rand_tensor(rng, (1, 2, 3, 3))
        p = ConvParams(kernel=rand_tensor(rng, (2, 3, 4, 4)), bias=np.zeros(3), stride=2, padding=1)
        g = np.zeros(transposed_conv2d_forward(x, p).shape)
        gx, gk, gb = transposed_conv2d_backward(x, p, g)
        assert not gx.any() and not gk.any() and not gb.any()

    def test_backward_scalar_chain_rule(self):
        x = np.full((1, 1, 1, 1), 3.0)
        p = ConvParams(kernel=np.full((1, 1, 1, 1), 2.0), bias=np.zeros(1))
        gx, gk, gb = transposed_conv2d_backward(x, p, np.ones((1, 1, 1, 1)))
        assert gx[0, 0, 0, 0] == 2.0
        assert gk[0, 0, 0, 0] == 3.0
        assert gb[0] == 1.0

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(12)
        x = rand_tensor(rng, (1, 2, 3, 3))
        kernel = rand_tensor(rng, (2, 3, 4, 4))
        bias = rand_tensor(rng, (3,))
        p = ConvParams(kernel=kernel, bias=bias, stride=2, padding=1)
        g = rand_tensor(rng, transposed_conv2d_forward(x, p).shape)
        gx, gk, gb = transposed_conv2d_backward(x, p, g)

        fd_x = finite_difference(
            lambda v: float((g * transposed_conv2d_forward(v, p)).sum()), x.copy(), FD_STEP)
        fd_k = finite_difference(
            lambda v: float((g * transposed_conv2d_forward(x, ConvParams(v, bias, 2, 1))).sum()),
            kernel.copy(), FD_STEP)
        fd_b = finite_difference(
            lambda v: float((g * transposed_conv2d_forward(x, ConvParams(kernel, v, 2, 1))).sum()),
            bias.copy(), FD_STEP)
        assert max_relative_error(gx, fd_x) < FD_RTOL
        assert max_relative_error(gk, fd_k) < FD_RTOL
        assert max_relative_error(gb, fd_b) < FD_RTOL

    def test_non_positive_output_rejected(self):
        x = np.zeros((1, 1, 1, 1))
        p = ConvParams(kernel=np.zeros((1, 1, 2, 2)), bias=np.zeros(1), stride=1, padding=1)
        with pytest.raises(ConfigurationError):
            transposed_conv2d_forward(x, p)


class TestSoftmaxCELoss:
    def test_uniform_logits_give_log_c(self):
        logits = np.zeros((1, 20, 2, 2))
        labels = np.zeros((1, 2, 2), dtype=int)
        loss, _ = softmax_ce_loss(logits, labels)
        assert loss == pytest.approx(np.log(20.0), abs=1e-12)

    def test_saturated_correct_prediction(self):
        logits = np.zeros((1, 4, 2, 2))
        logits[:, 2] = 1000.0
        labels = np.full((1, 2, 2), 2, dtype=int)
        loss, _ = softmax_ce_loss(logits, labels)
        assert loss < 1e-9

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(13)
        logits = rand_tensor(rng, (1, 4, 2, 2))
        labels = rng.integers(0, 4, size=(1, 2, 2))
        loss, grad = softmax_ce_loss(logits, labels)

        # direct per-pixel formula, no stabilization tricks
        total = 0.0
        want_grad = np.zeros_like(logits)
        npix = 4
        for i in range(2):
            for j in range(2):
                e = np.exp(logits[0, :, i, j])
                probs = e / e.sum()
                total += -np.log(probs[labels[0, i, j]])
                want_grad[0, :, i, j] = probs / npix
                want_grad[0, labels[0, i, j], i, j] -= 1.0 / npix
        np.testing.assert_allclose(loss, total / npix, rtol=0, atol=1e-10)
        np.testing.assert_allclose(grad, want_grad, rtol=0, atol=1e-10)

    def test_gradient_sums_to_zero_over_channels(self):
        rng = np.random.default_rng(14)
        logits = rand_tensor(rng, (2, 5, 3, 3))
        labels = rng.integers(0, 5, size=(2, 3, 3))
        _, grad = softmax_ce_loss(logits, labels)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, rtol=0, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        logits = rand_tensor(rng, (1, 3, 2, 2))
        labels = rng.integers(0, 3, size=(1, 2, 2))
        _, grad = softmax_ce_loss(logits, labels)
        fd = finite_difference(
            lambda v: softmax_ce_loss(v, labels)[0], logits.copy(), FD_STEP)
        assert max_relative_error(grad, fd) < FD_RTOL

    def test_out_of_range_label_names_pixel(self):
        logits = np.zeros((1, 4, 2, 2))
        labels = np.zeros((1, 2, 2), dtype=int)
        labels[0, 1, 0] = 4
        with pytest.raises(DataError, match=r"4.*\(1, 0\)"):
            softmax_ce_loss(logits, labels)


class TestSgdStep:
    def test_zero_lr_leaves_params(self):
        params = {"w": np.array([1.0, 2.0])}
        grads = {"w": np.array([5.0, -5.0])}
        vel = zero_velocity(params)
        sgd_step(params, grads, lr=0.0, momentum=0.9, velocity=vel)
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])

    def test_plain_gradient_step(self):
        params = {"w": np.array([1.0])}
        grads = {"w": np.array([0.5])}
        vel = zero_velocity(params)
        sgd_step(params, grads, lr=0.1, momentum=0.0, velocity=vel)
        assert params["w"][0] == pytest.approx(0.95, abs=1e-15)

    def test_two_momentum_steps_hand_unrolled(self):
        # v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        params = {"w": np.array([0.0])}
        vel = zero_velocity(params)
        for _ in range(2):
            sgd_step(params, {"w": np.array([1.0])}, lr=0.1, momentum=0.9, velocity=vel)
        assert params["w"][0] == pytest.approx(-0.29, abs=1e-15)

    def test_shape_mismatch(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(DimensionError):
            sgd_step(params, {"w": np.zeros(3)}, 0.1, 0.9, zero_velocity(params))

    def test_key_mismatch(self):
        with pytest.raises(DimensionError):
            sgd_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, 0.1, 0.9, {"a": np.zeros(1)})


class TestFiniteness:
    @pytest.mark.parametrize("seed", range(4))
    def test_forward_kernels_stay_finite(self, seed):
        rng = np.random.default_rng(300 + seed)
        x = rand_tensor(rng, (1, 2, 4, 4))
        p = ConvParams(kernel=rand_tensor(rng, (3, 2, 3, 3)), bias=rand_tensor(rng, (3,)), padding=1)
        assert np.isfinite(conv2d_forward(x, p)).all()
        assert np.isfinite(relu_forward(x)).all()
        assert np.isfinite(maxpool2_forward(x)[0]).all()
        pt = ConvParams(kernel=rand_tensor(rng, (2, 3, 4, 4)), bias=rand_tensor(rng, (3,)),
                        stride=2, padding=1)
        assert np.isfinite(transposed_conv2d_forward(x, pt)).all()


@settings(max_examples=30, deadline=None)
@given(
    shape=st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
    data=st.data(),
)
def test_relu_forward_properties(shape, data):
    flat = data.draw(st.lists(
        st.floats(-10, 10, allow_nan=False),
        min_size=int(np.prod(shape)), max_size=int(np.prod(shape)),
    ))
    x = np.array(flat).reshape(shape)
    y = relu_forward(x)
    assert (y >= 0).all()
    assert np.array_equal(y[x > 0], x[x > 0])
    assert not y[x <= 0].any()
