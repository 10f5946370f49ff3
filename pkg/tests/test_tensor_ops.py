"""Forward values, backward rules and invariants of the tensor engine."""

import math

import numpy as np
import pytest

from msfcn import Tape, Tensor, backward
from msfcn import ops
from msfcn.errors import InvalidArgument
from msfcn.gradcheck import grad_check, standard_op_checks


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), dtype=np.float64)


class TestConv2d:
    def test_identity_kernel(self):
        x = t64(np.random.default_rng(0).normal(size=(1, 1, 3, 3)))
        w = t64([[[[1.0]]]])
        y = ops.conv2d(x, w)
        np.testing.assert_array_equal(y.data, x.data)

    def test_same_padding_shape(self):
        x = Tensor(np.zeros((1, 1, 108, 108), dtype=np.float32))
        w = Tensor(np.zeros((64, 1, 3, 3), dtype=np.float32))
        y = ops.conv2d(x, w, stride=1, pad=1)
        assert y.shape == (1, 64, 108, 108)

    def test_all_ones_sum(self):
        x = t64(np.ones((1, 2, 2, 2)))
        w = t64(np.ones((1, 2, 2, 2)))
        b = t64([0.0])
        y = ops.conv2d(x, w, b)
        assert y.shape == (1, 1, 1, 1)
        assert y.data[0, 0, 0, 0] == 8.0

    def test_output_size_formula(self):
        x = Tensor(np.zeros((2, 3, 11, 13), dtype=np.float32))
        w = Tensor(np.zeros((5, 3, 3, 3), dtype=np.float32))
        y = ops.conv2d(x, w, stride=2, pad=1)
        assert y.shape == (2, 5, (11 + 2 - 3) // 2 + 1, (13 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 5, 4, 4), dtype=np.float32))
        w = Tensor(np.zeros((2, 4, 3, 3), dtype=np.float32))
        with pytest.raises(InvalidArgument, match="channels"):
            ops.conv2d(x, w)

    def test_kernel_larger_than_input_raises(self):
        x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))
        with pytest.raises(InvalidArgument, match="kernel"):
            ops.conv2d(x, w)

    def test_groups_equal_independent_convs(self):
        # grouped conv == per-group dense convs on channel slices, concatenated
        rng = np.random.default_rng(3)
        g = 2
        x = t64(rng.normal(size=(2, 6, 7, 7)))
        w = t64(rng.normal(size=(4, 3, 3, 3)))
        grouped = ops.conv2d(x, w, stride=1, pad=1, groups=g)
        parts = []
        for gi in range(g):
            xs = t64(x.data[:, gi * 3 : (gi + 1) * 3])
            ws = t64(w.data[gi * 2 : (gi + 1) * 2])
            parts.append(ops.conv2d(xs, ws, stride=1, pad=1).data)
        np.testing.assert_allclose(grouped.data, np.concatenate(parts, axis=1), rtol=1e-12)

    def test_brute_force_small(self):
        # independent oracle: direct loop over the correlation definition
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        stride, pad = 2, 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (5 + 2 * pad - 3) // stride + 1
        expect = np.zeros((1, 3, ho, ho))
        for o in range(3):
            for i in range(ho):
                for j in range(ho):
                    patch = xp[0, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                    expect[0, o, i, j] = (patch * w[o]).sum()
        got = ops.conv2d(t64(x), t64(w), stride=stride, pad=pad)
        np.testing.assert_allclose(got.data, expect, rtol=1e-12)


class TestDeconv2d:
    @pytest.mark.parametrize("ratio,h", [(2, 6), (3, 9), (6, 4), (9, 3), (12, 2), (18, 3)])
    def test_exact_upscaling(self, ratio, h):
        k, s, p = ops.deconv_geometry(ratio)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 2, h, h)).astype(np.float32))
        w = Tensor(np.random.default_rng(2).normal(size=(2, 3, k, k)).astype(np.float32))
        y = ops.deconv2d(x, w, ratio=ratio)
        assert y.shape == (1, 3, ratio * h, ratio * h)

    def test_ratio3_shape(self):
        x = Tensor(np.zeros((1, 1, 9, 9), dtype=np.float32))
        k, _, _ = ops.deconv_geometry(3)
        w = Tensor(np.zeros((1, 4, k, k), dtype=np.float32))
        assert ops.deconv2d(x, w, ratio=3).shape == (1, 4, 27, 27)

    def test_ratio18_shape(self):
        x = Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32))
        k, _, _ = ops.deconv_geometry(18)
        w = Tensor(np.zeros((1, 2, k, k), dtype=np.float32))
        assert ops.deconv2d(x, w, ratio=18).shape == (1, 2, 54, 54)

    def test_single_pixel_spread(self):
        x = t64([[[[1.0]]]])
        w = t64(np.ones((1, 1, 2, 2)))
        y = ops.deconv2d(x, w, ratio=2, kernel=2, stride=2, pad=0)
        np.testing.assert_array_equal(y.data, np.ones((1, 1, 2, 2)))

    def test_bad_geometry_raises(self):
        x = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32))
        with pytest.raises(InvalidArgument, match="not the required"):
            ops.deconv2d(x, w, ratio=2, kernel=3, stride=2, pad=0)

    def test_adjoint_of_conv(self):
        # transposed convolution is the adjoint of the matching convolution:
        # <conv(x), y> == <x, deconv(y)>
        rng = np.random.default_rng(5)
        x = t64(rng.normal(size=(1, 2, 8, 8)))
        u = t64(rng.normal(size=(3, 2, 4, 4)))
        y = t64(rng.normal(size=(1, 3, 4, 4)))
        fwd = ops.conv2d(x, u, None, stride=2, pad=1)
        up = ops.deconv2d(y, u, ratio=2, kernel=4, stride=2, pad=1)
        assert fwd.shape == (1, 3, 4, 4)
        assert up.shape == (1, 2, 8, 8)
        lhs = float((fwd.data * y.data).sum())
        rhs = float((x.data * up.data).sum())
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


class TestBilinear:
    def test_constant_preserved(self):
        for r in (1, 2, 3, 6):
            x = Tensor(np.full((1, 2, 4, 4), 3.5, dtype=np.float32))
            y = ops.bilinear_upsample(x, r)
            np.testing.assert_allclose(y.data, 3.5, rtol=1e-6)

    def test_ratio_one_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 5, 5)).astype(np.float32))
        np.testing.assert_array_equal(ops.bilinear_upsample(x, 1).data, x.data)

    def test_against_scalar_oracle(self):
        # per-pixel half-pixel-center interpolation, written independently
        def oracle(img, r):
            h, w = img.shape
            out = np.zeros((h * r, w * r))
            for i in range(h * r):
                for j in range(w * r):
                    sy = min(max((i + 0.5) / r - 0.5, 0.0), h - 1.0)
                    sx = min(max((j + 0.5) / r - 0.5, 0.0), w - 1.0)
                    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
                    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                    ay, ax = sy - y0, sx - x0
                    out[i, j] = (
                        img[y0, x0] * (1 - ay) * (1 - ax)
                        + img[y0, x1] * (1 - ay) * ax
                        + img[y1, x0] * ay * (1 - ax)
                        + img[y1, x1] * ay * ax
                    )
            return out

        img = np.array([[0.0, 2.0], [2.0, 4.0]])
        got = ops.bilinear_upsample(t64(img[None, None]), 2).data[0, 0]
        np.testing.assert_allclose(got, oracle(img, 2), rtol=1e-12)

        rng = np.random.default_rng(6)
        img = rng.normal(size=(5, 4))
        got = ops.bilinear_upsample(t64(img[None, None]), 3).data[0, 0]
        np.testing.assert_allclose(got, oracle(img, 3), rtol=1e-12)


class TestMaxpool:
    def test_tiny(self):
        y = ops.maxpool2d(t64([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
        np.testing.assert_array_equal(y.data, [[[[4.0]]]])

    def test_shapes(self):
        x = Tensor(np.zeros((1, 1, 108, 108), dtype=np.float32))
        assert ops.maxpool2d(x, 2).shape == (1, 1, 54, 54)
        assert ops.maxpool2d(x, 36).shape == (1, 1, 3, 3)

    def test_non_divisible_raises(self):
        x = Tensor(np.zeros((1, 1, 10, 10), dtype=np.float32))
        with pytest.raises(InvalidArgument, match="divisible"):
            ops.maxpool2d(x, 3)

    def test_brute_force_windows(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 12, 12))
        for r in (2, 3, 4, 6):
            y = ops.maxpool2d(t64(x), r).data
            for n in range(2):
                for c in range(3):
                    for i in range(12 // r):
                        for j in range(12 // r):
                            assert y[n, c, i, j] == x[n, c, i * r : (i + 1) * r, j * r : (j + 1) * r].max()

    def test_tie_routes_to_first(self):
        x = t64(np.ones((1, 1, 2, 2)))
        tape = Tape()
        y = ops.maxpool2d(x, 2, tape=tape)
        loss = ops.sum_all(y, tape)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


class TestBatchnorm:
    @staticmethod
    def _buffers(c):
        return Tensor(np.zeros(c), dtype=np.float64), Tensor(np.ones(c), dtype=np.float64)

    def test_normalizes(self):
        rng = np.random.default_rng(8)
        x = t64(rng.normal(loc=2.0, scale=3.0, size=(4, 3, 9, 9)))
        rm, rv = self._buffers(3)
        y = ops.batchnorm2d(x, t64(np.ones(3)), t64(np.zeros(3)), "train", rm, rv)
        mean = y.data.mean(axis=(0, 2, 3))
        var = y.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-6
        assert np.abs(var - 1.0).max() < 1e-5

    def test_constant_channel_zeros(self):
        x = Tensor(np.full((2, 1, 4, 4), 7.0, dtype=np.float32))
        rm, rv = self._buffers(1)
        y = ops.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), "train", rm, rv)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-4)

    def test_affine_output_stats(self):
        rng = np.random.default_rng(9)
        x = t64(rng.normal(size=(4, 2, 8, 8)))
        rm, rv = self._buffers(2)
        y = ops.batchnorm2d(x, t64([2.0, 2.0]), t64([3.0, 3.0]), "train", rm, rv)
        assert np.allclose(y.data.mean(axis=(0, 2, 3)), 3.0, atol=1e-6)
        assert np.allclose(y.data.std(axis=(0, 2, 3)), 2.0, atol=1e-5)

    def test_running_stats_feed_eval(self):
        rng = np.random.default_rng(10)
        x = t64(rng.normal(loc=1.0, size=(4, 2, 6, 6)))
        rm, rv = self._buffers(2)
        ones, zeros = t64(np.ones(2)), t64(np.zeros(2))
        # momentum 1.0 copies the batch statistics into the buffers
        ops.batchnorm2d(x, ones, zeros, "train", rm, rv, momentum=1.0)
        y_eval = ops.batchnorm2d(x, ones, zeros, "eval", rm, rv)
        assert np.abs(y_eval.data.mean(axis=(0, 2, 3))).max() < 1e-6

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 3, 2, 2), dtype=np.float32))
        rm, rv = self._buffers(3)
        with pytest.raises(InvalidArgument, match="scale"):
            ops.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(3)), "train", rm, rv)


class TestPointwise:
    def test_relu(self):
        y = ops.relu(t64([[[[-1.0, 0.0, 2.0, -3.0]]]]))
        np.testing.assert_array_equal(y.data, [[[[0.0, 0.0, 2.0, 0.0]]]])

    def test_concat_channels(self):
        a = Tensor(np.zeros((2, 3, 5, 5), dtype=np.float32))
        b = Tensor(np.zeros((2, 5, 5, 5), dtype=np.float32))
        assert ops.concat([a, b]).shape == (2, 8, 5, 5)

    def test_concat_slice_roundtrip(self):
        rng = np.random.default_rng(11)
        a = t64(rng.normal(size=(1, 2, 3, 3)))
        b = t64(rng.normal(size=(1, 4, 3, 3)))
        y = ops.concat([a, b]).data
        np.testing.assert_array_equal(y[:, :2], a.data)
        np.testing.assert_array_equal(y[:, 2:], b.data)

    def test_concat_spatial_mismatch(self):
        a = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        b = Tensor(np.zeros((1, 1, 5, 4), dtype=np.float32))
        with pytest.raises(InvalidArgument, match="concat"):
            ops.concat([a, b])

    def test_dropout_p0_identity(self):
        x = t64(np.random.default_rng(12).normal(size=(1, 2, 4, 4)))
        for mode in ("train", "eval"):
            np.testing.assert_array_equal(ops.dropout(x, 0.0, mode).data, x.data)

    def test_dropout_eval_identity(self):
        x = t64(np.random.default_rng(13).normal(size=(1, 2, 4, 4)))
        np.testing.assert_array_equal(ops.dropout(x, 0.9, "eval").data, x.data)

    def test_dropout_train_scales_survivors(self):
        x = Tensor(np.ones((1, 1, 50, 50), dtype=np.float64), dtype=np.float64)
        y = ops.dropout(x, 0.5, "train", rng=np.random.default_rng(14))
        vals = np.unique(y.data)
        assert set(vals.tolist()) <= {0.0, 2.0}

    def test_dropout_deterministic_per_seed(self):
        x = Tensor(np.ones((2, 3, 8, 8), dtype=np.float32))
        y1 = ops.dropout(x, 0.5, "train", rng=np.random.default_rng(42))
        y2 = ops.dropout(x, 0.5, "train", rng=np.random.default_rng(42))
        assert np.array_equal(y1.data, y2.data)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        logits = t64(np.zeros((1, 3, 2, 2)))
        loss = ops.softmax_cross_entropy(logits, np.zeros((1, 2, 2), dtype=np.int64))
        assert abs(float(loss.data) - math.log(3.0)) < 1e-12

    def test_confident_correct(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 0] = 50.0
        loss = ops.softmax_cross_entropy(t64(logits), np.zeros((1, 1, 1), dtype=np.int64))
        assert float(loss.data) < 1e-6

    def test_two_class_scalar(self):
        logits = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        loss = ops.softmax_cross_entropy(t64(logits), np.zeros((1, 1, 1), dtype=np.int64))
        expect = -math.log(math.e / (math.e + 1.0))
        assert abs(float(loss.data) - expect) < 1e-12

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(15)
        logits = rng.normal(scale=5.0, size=(2, 4, 6, 6))
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12

    def test_label_out_of_range(self):
        logits = t64(np.zeros((1, 3, 2, 2)))
        labels = np.zeros((1, 2, 2), dtype=np.int64)
        labels[0, 1, 0] = 3
        with pytest.raises(InvalidArgument, match=r"\(n=0, h=1, w=0\)"):
            ops.softmax_cross_entropy(logits, labels)


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.random.default_rng(16).normal(size=(2, 3, 4, 5)))
        tape = Tape()
        loss = ops.sum_all(x, tape)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_dead_relu_gives_zeros(self):
        x = t64(-np.abs(np.random.default_rng(17).normal(size=(1, 2, 3, 3))) - 0.1)
        tape = Tape()
        loss = ops.sum_all(ops.relu(x, tape=tape), tape)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))

    def test_fan_out_accumulates(self):
        x = t64(np.random.default_rng(18).normal(size=(1, 1, 2, 2)))
        tape = Tape()
        y = ops.concat([x, x], tape=tape)  # x feeds two consumers
        loss = ops.sum_all(y, tape)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, 2.0 * np.ones_like(x.data))

    def test_non_scalar_loss_rejected(self):
        x = t64(np.ones((1, 1, 2, 2)))
        tape = Tape()
        y = ops.relu(x, tape=tape)
        with pytest.raises(InvalidArgument, match="scalar"):
            backward(tape, y)

    def test_tape_consumed(self):
        x = t64(np.ones((1, 1, 2, 2)))
        tape = Tape()
        loss = ops.sum_all(x, tape)
        backward(tape, loss)
        with pytest.raises(InvalidArgument, match="consumed"):
            backward(tape, loss)

    def test_unreached_params_zero_filled(self):
        x = t64(np.ones((1, 1, 2, 2)))
        unused = t64(np.ones((3,)))
        tape = Tape()
        loss = ops.sum_all(x, tape)
        backward(tape, loss, params=[x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(3))

    def test_composite_graph_matches_finite_differences(self):
        def f(tape, x, w, b, sc, sh):
            rm = Tensor(np.zeros(3), dtype=np.float64)
            rv = Tensor(np.ones(3), dtype=np.float64)
            y = ops.conv2d(x, w, b, stride=1, pad=1, tape=tape)
            y = ops.batchnorm2d(y, sc, sh, "train", rm, rv, tape=tape)
            y = ops.relu(y, tape=tape)
            y = ops.maxpool2d(y, 2, tape=tape)
            return ops.sum_all(y, tape)

        rng = np.random.default_rng(19)
        x = t64(rng.normal(size=(2, 2, 8, 8)))
        w = t64(rng.normal(size=(3, 2, 3, 3)))
        b = t64(rng.normal(size=(3,)))
        sc = t64(rng.uniform(0.5, 1.5, size=(3,)))
        sh = t64(rng.normal(size=(3,)))
        err = grad_check(f, (x, w, b, sc, sh), eps=1e-5)
        assert err < 1e-4


class TestGradCheck:
    def test_quadratic_near_exact(self):
        def square_sum(tape, x):
            y = Tensor(np.asarray((x.data**2).sum()), dtype=np.float64)
            if tape is not None:
                tape.record((x,), y, lambda dy: (2.0 * x.data * dy,))
            return y

        x = t64(np.random.default_rng(20).normal(size=(4, 5)))
        assert grad_check(square_sum, (x,), eps=1e-5) < 1e-8

    def test_requires_float64(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))
        with pytest.raises(InvalidArgument, match="float64"):
            grad_check(lambda tape, a: ops.sum_all(a, tape), (x,))

    def test_all_ops_below_tolerance(self):
        results = standard_op_checks(seed=0)
        assert len(results) >= 12
        for name, err in results.items():
            assert err < 1e-4, f"{name}: {err}"


class TestXavier:
    def test_bound_formula(self):
        t = ops.xavier_init((100000,), 3, 3, np.random.default_rng(21))
        assert np.abs(t.data).max() <= 1.0

    def test_support(self):
        t = ops.xavier_init((1000,), 64, 128, np.random.default_rng(22))
        a = math.sqrt(6.0 / (64 + 128))
        assert np.abs(t.data).max() <= a

    def test_variance(self):
        n = 100000
        t = ops.xavier_init((n,), 10, 20, np.random.default_rng(23))
        a = math.sqrt(6.0 / 30)
        assert abs(t.data.var() - a * a / 3.0) < 0.05 * a * a / 3.0

    def test_deterministic(self):
        t1 = ops.xavier_init((4, 4, 3, 3), 36, 36, np.random.default_rng(5))
        t2 = ops.xavier_init((4, 4, 3, 3), 36, 36, np.random.default_rng(5))
        assert np.array_equal(t1.data, t2.data)


class TestDtypePropagation:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_conv_keeps_dtype(self, dtype):
        x = Tensor(np.ones((1, 2, 4, 4)), dtype=dtype)
        w = Tensor(np.ones((2, 2, 3, 3)), dtype=dtype)
        assert ops.conv2d(x, w, pad=1).dtype == dtype

    def test_default_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
