"""Tensor engine: forward semantics, gradients, finite-difference oracle and Adam."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from posegraph import tensor as T
from posegraph.tensor import Parameter, ShapeError, Tensor


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def naive_conv2d(x, w, b, stride, pad):
    """Loop-based cross-correlation used as an independent oracle."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    patch = xp[i, :, r * stride:r * stride + kh, c * stride:c * stride + kw]
                    out[i, o, r, c] = (patch * w[o]).sum() + (0.0 if b is None else b[o])
    return out


class TestConv2d:
    def test_ones_kernel_counts_overlaps(self):
        y = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), None, stride=1, padding=1)
        assert y.data[0, 0, 1, 1] == 9
        assert y.data[0, 0, 0, 0] == y.data[0, 0, 2, 2] == 4
        assert y.data[0, 0, 0, 1] == 6

    def test_identity_1x1(self):
        x = rand((2, 3, 5, 4))
        w = np.zeros((3, 3, 1, 1))
        w[[0, 1, 2], [0, 1, 2]] = 1.0
        y = T.conv2d(Tensor(x), Tensor(w), None)
        np.testing.assert_array_equal(y.data, x)

    @pytest.mark.parametrize("stride,pad,k,size", [(1, 1, 3, 5), (2, 1, 3, 6), (2, 1, 3, 5), (1, 0, 1, 4)])
    def test_matches_loop_oracle(self, stride, pad, k, size):
        x, w, b = rand((2, 3, size, size), 1), rand((4, 3, k, k), 2), rand(4, 3)
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(y.data, naive_conv2d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_weight_gradient_finite_difference(self):
        x = Tensor(rand((2, 4, 5, 5), 4))
        w = Tensor(rand((3, 4, 3, 3), 5))
        proj = rand((2, 3, 5, 5), 6)
        err = T.grad_check(lambda v: T.sum_all(T.mul(T.conv2d(x, v, None, padding=1), proj)), w)
        assert err < 1e-4

    def test_channel_mismatch_is_descriptive(self):
        with pytest.raises(ShapeError, match="channel"):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), None, padding=1)


class TestElementwise:
    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-2.0, 3.0])).data, [0.0, 3.0])

    def test_sigmoid_at_zero_and_derivative(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        y = T.sigmoid(x)
        assert y.data[0] == 0.5
        T.backward(T.sum_all(y))
        assert x.grad[0] == pytest.approx(0.25, abs=1e-15)
        assert T.grad_check(lambda v: T.sum_all(T.sigmoid(v)), Tensor(np.array([0.0]))) < 1e-9

    def test_sigmoid_extremes_stay_open_interval_and_finite(self):
        y = T.sigmoid(Tensor(np.array([-30.0, -5.0, 5.0, 30.0]))).data
        assert np.all((y > 0) & (y < 1))
        assert np.all(np.isfinite(T.sigmoid(Tensor(np.array([-800.0, 800.0]))).data))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
    def test_relu_nonnegative_sigmoid_bounded(self, a):
        assert np.all(T.relu(Tensor(a)).data >= 0)
        s = T.sigmoid(Tensor(a)).data
        assert np.all((s > 0) & (s < 1))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_axis(Tensor(np.ones(4)), 0).data, [0.25] * 4, atol=1e-15)

    def test_closed_form_pair(self):
        y = T.softmax_axis(Tensor(np.array([0.0, math.log(3.0)])), 0).data
        np.testing.assert_allclose(y, [0.25, 0.75], atol=1e-15)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            T.softmax_axis(Tensor(np.ones((2, 3))), 2)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, (2, 3, 5), elements=st.floats(-30, 30)),
        st.integers(0, 2),
        st.floats(-100, 100),
    )
    def test_normalized_and_shift_invariant(self, a, axis, c):
        y = T.softmax_axis(Tensor(a), axis).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-12)
        np.testing.assert_allclose(T.softmax_axis(Tensor(a + c), axis).data, y, atol=1e-9)


class TestPoolingAndResampling:
    def test_gap_mean(self):
        y = T.global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert y.shape == (1, 1, 1, 1)
        assert y.data.item() == 2.5

    def test_gap_constant(self):
        assert np.all(T.global_avg_pool(Tensor(np.full((2, 3, 4, 5), 1.7))).data == 1.7)

    def test_gap_gradient_spreads_evenly(self):
        x = Tensor(rand((1, 2, 3, 4)), requires_grad=True)
        T.backward(T.sum_all(T.global_avg_pool(x)))
        np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 12), atol=1e-16)
        assert T.grad_check(lambda v: T.sum_all(T.mul(T.global_avg_pool(v), rand((1, 2, 1, 1), 3))), x) < 1e-4

    def test_nearest_up_block_replicates(self):
        y = T.resample(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), "nearest_up", 2).data[0, 0]
        np.testing.assert_array_equal(y, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_bilinear_up_then_average_down_keeps_constant(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.25))
        up = T.resample(x, "bilinear_up", 2)
        assert up.shape == (1, 2, 8, 8)
        avg = np.full((2, 2, 3, 3), 0.0)
        avg[0, 0] = avg[1, 1] = 1.0 / 9.0
        down = T.resample(up, "stride_down", 2, Tensor(avg))
        assert down.shape == (1, 2, 4, 4)
        # border cells see zero padding; interior cells average a constant
        np.testing.assert_allclose(down.data[:, :, 1:, 1:], 3.25, atol=1e-14)
        np.testing.assert_allclose(up.data, 3.25, atol=1e-14)

    def test_bilinear_up_gradient(self):
        proj = rand((1, 2, 6, 8), 9)
        err = T.grad_check(lambda v: T.sum_all(T.mul(T.resample(v, "bilinear_up", 2), proj)), Tensor(rand((1, 2, 3, 4))))
        assert err < 1e-4

    def test_factor_and_divisibility_checks(self):
        with pytest.raises(ValueError):
            T.resample(Tensor(np.ones((1, 1, 4, 4))), "nearest_up", 3)
        with pytest.raises(ShapeError):
            T.resample(Tensor(np.ones((1, 1, 5, 4))), "stride_down", 2, Tensor(np.ones((1, 1, 3, 3))))


class TestShapeOps:
    def test_identity_matmul(self):
        a = rand((3, 2, 5))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)

    def test_concat_shapes(self):
        y = T.concat_channels([Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((1, 5, 4, 4)))])
        assert y.shape == (1, 8, 4, 4)

    def test_concat_rejects_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels([Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((1, 5, 4, 2)))])

    def test_broadcast_channel_scaling(self):
        att = rand((1, 3, 1, 1))
        x = rand((1, 3, 4, 5), 1)
        y = T.mul(Tensor(att), Tensor(x)).data
        for c in range(3):
            np.testing.assert_array_equal(y[0, c], att[0, c, 0, 0] * x[0, c])

    def test_broadcast_only_over_singletons(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((1, 2, 4, 4))))

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_reshape_size_error(self):
        with pytest.raises(ShapeError):
            T.reshape(Tensor(np.ones(6)), (4, 2))


class TestBatchNorm:
    def test_train_mode_normalizes_and_updates_running_stats(self):
        x = rand((4, 3, 5, 5)) * 3 + 2
        rm, rv = np.zeros(3), np.ones(3)
        y = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)
        mu = x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(rm, 0.1 * mu, rtol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-12)

    def test_eval_identity(self):
        x = rand((2, 3, 4, 4))
        y = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=False)
        np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), rtol=1e-15)

    def test_gradients(self):
        x, g, b = Tensor(rand((3, 2, 3, 3), 1)), Tensor(rand(2, 2) + 1.5), Tensor(rand(2, 3))
        proj = rand((3, 2, 3, 3), 4)

        def f(xx, gg, bb):
            return T.sum_all(T.mul(T.batch_norm(xx, gg, bb, np.zeros(2), np.ones(2), training=True), proj))

        assert T.grad_check(lambda v: f(v, g, b), x) < 1e-4
        assert T.grad_check(lambda v: f(x, v, b), g) < 1e-4
        assert T.grad_check(lambda v: f(x, g, v), b) < 1e-4


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(rand((2, 3)), requires_grad=True)
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_2x(self):
        x = Tensor(rand((4,)), requires_grad=True)
        T.backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)

    def test_repeated_calls_accumulate(self):
        x = Tensor(rand((3,)), requires_grad=True)
        T.backward(T.sum_all(x))
        T.backward(T.sum_all(T.scale(x, 2.0)))
        np.testing.assert_array_equal(x.grad, np.full(3, 3.0))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            T.backward(T.relu(Tensor(np.ones(3), requires_grad=True)))

    def test_shared_subexpression(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = T.mul(x, x)
        T.backward(T.sum_all(T.add(y, y)))
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = T.sum_all(T.mul(x, x))
        assert not y.requires_grad


class TestGradCheck:
    def test_sum_of_squares(self):
        assert T.grad_check(lambda v: T.sum_all(T.square(v)), Tensor(rand((5, 4)))) < 1e-9

    def test_conv_chain(self):
        w1, w2 = Tensor(rand((4, 2, 3, 3), 1)), Tensor(rand((3, 4, 3, 3), 2))
        proj = rand((1, 3, 4, 4), 3)

        def f(v):
            return T.sum_all(T.mul(T.conv2d(T.sigmoid(T.conv2d(v, w1, None, padding=1)), w2, None, padding=1), proj))

        assert T.grad_check(f, Tensor(rand((1, 2, 4, 4), 4))) < 1e-4

    def test_relu_kink_nudged_away(self):
        x = Tensor(np.array([0.0, 1e-9, -1e-9, 0.5]))
        err = T.grad_check(lambda v: T.sum_all(T.relu(v)), x, kink_margin=1e-3)
        assert err < 1e-9
        assert np.all(np.abs(x.data) >= 1e-3)

    def test_nondeterministic_function_detected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(T.NondeterministicError):
            T.grad_check(lambda v: T.sum_all(T.scale(v, rng.uniform())), Tensor(np.ones(3)))

    def test_detects_wrong_backward(self):
        def bad_square(x):
            return T._make(x.data**2, (x,), lambda g: T._accum(x, g * x.data))  # missing factor 2

        assert T.grad_check(lambda v: T.sum_all(bad_square(v)), Tensor(rand(4) + 2)) > 0.1


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        p = Parameter(np.array([1.0, -1.0]))
        p.grad[:] = [3.0, -0.02]
        T.adam_step([p], lr=0.01)
        np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-8)
        assert p.t == 1

    def test_zero_gradient_leaves_parameters(self):
        p = Parameter(np.array([0.3, 0.4]))
        T.adam_step([p], lr=0.1)
        np.testing.assert_array_equal(p.data, [0.3, 0.4])

    def test_minimizes_quadratic(self):
        p = Parameter(np.array([1.0]))
        for _ in range(200):
            p.zero_grad()
            T.backward(T.sum_all(T.square(p)))
            T.adam_step([p], lr=0.1)
        assert abs(p.data[0]) < 0.01

    def test_moment_shapes(self):
        p = Parameter(np.zeros((2, 3)))
        assert p.m.shape == p.v.shape == p.shape and p.t == 0

    def test_clip_grad_norm(self):
        a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
        a.grad[:] = [3.0, 0.0]
        b.grad[:] = [4.0]
        norm = T.clip_grad_norm([a, b], 1.0)
        assert norm == pytest.approx(5.0)
        assert T.global_grad_norm([a, b]) == pytest.approx(1.0)


class TestDeterminism:
    def test_forward_bit_identical(self):
        from posegraph.config import ModelConfig
        from posegraph.model import PoseNet

        x = rand((1, 3, 64, 64))
        outs = []
        for _ in range(2):
            net = PoseNet(ModelConfig(), seed=3)
            with T.no_grad():
                outs.append(net(Tensor(x)).heatmaps.data)
        assert np.array_equal(outs[0], outs[1])
