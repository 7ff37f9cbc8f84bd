"""Tests for the tensor/autodiff core.

Expected values come from independent oracles: nested-loop convolution,
direct formula evaluation, and central finite differences.
"""

import math

import numpy as np
import pytest

from rzc import autodiff as ad
from rzc.autodiff import Tensor
from rzc.errors import ShapeError


def naive_conv2d(x, w, b, stride=1, pad="same"):
    """Direct nested-loop convolution oracle (NHWC, kh x kw x Cin x Cout)."""
    n, h, wid, cin = x.shape
    kh, kw, _, cout = w.shape
    if pad == "same":
        oh = -(-h // stride)
        ow = -(-wid // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - wid, 0)
        xp = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    else:
        oh = (h - kh) // stride + 1
        ow = (wid - kw) // stride + 1
        xp = x
    out = np.zeros((n, oh, ow, cout))
    for bi in range(n):
        for i in range(oh):
            for j in range(ow):
                for co in range(cout):
                    acc = 0.0
                    for ki in range(kh):
                        for kj in range(kw):
                            for ci in range(cin):
                                acc += xp[bi, i * stride + ki, j * stride + kj, ci] * w[ki, kj, ci, co]
                    out[bi, i, j, co] = acc + b[co]
    return out


class TestConv2d:
    def test_all_ones_center(self):
        x = Tensor(np.ones((1, 4, 4, 1)))
        w = Tensor(np.ones((3, 3, 1, 1)))
        b = Tensor(np.zeros(1))
        out = ad.conv2d(x, w, b).data
        assert out[0, 1, 1, 0] == pytest.approx(9.0)
        assert out[0, 2, 2, 0] == pytest.approx(9.0)
        # Corners see only a 2x2 neighbourhood under zero padding.
        assert out[0, 0, 0, 0] == pytest.approx(4.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(2, 5, 6, 3))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 0, 0] = w[0, 0, 1, 1] = w[0, 0, 2, 2] = 1.0
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out, x.astype(np.float32), atol=1e-7)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 5, 5, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        got = ad.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        want = naive_conv2d(x, w, b)
        np.testing.assert_allclose(got, want, atol=1e-6)

    @pytest.mark.parametrize("stride,pad", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
    def test_strides_and_padding_match_oracle(self, stride, pad):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 7, 6, 3))
        w = rng.normal(size=(3, 3, 3, 2))
        b = rng.normal(size=2)
        got = ad.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), stride=stride, pad=pad).data
        want = naive_conv2d(x, w, b, stride=stride, pad=pad)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.ones((1, 4, 4, 2)))
        w = Tensor(np.ones((3, 3, 3, 1)))
        with pytest.raises(ShapeError):
            ad.conv2d(x, w)

    def test_same_pad_output_dims(self):
        x = Tensor(np.ones((1, 5, 5, 1)))
        w = Tensor(np.ones((3, 3, 1, 4)))
        assert ad.conv2d(x, w, stride=2).shape == (1, 3, 3, 4)


class TestConv2dTranspose:
    def test_upsamples_by_stride(self):
        x = Tensor(np.ones((1, 4, 4, 8)))
        w = Tensor(np.ones((5, 5, 8, 3)) * 0.01)
        out = ad.conv2d_transpose(x, w, stride=2)
        assert out.shape == (1, 8, 8, 3)

    def test_adjoint_of_conv2d(self):
        # <conv(x), y> == <x, conv_transpose(y)> for matching geometries.
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 6, 6, 2))
        y = rng.normal(size=(1, 3, 3, 4))
        w = rng.normal(size=(5, 5, 2, 4))
        cx = ad.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2).data
        wt = np.ascontiguousarray(np.swapaxes(w, 2, 3))
        ty = ad.conv2d_transpose(Tensor(y, dtype=np.float64), Tensor(wt, dtype=np.float64), stride=2).data
        assert np.vdot(cx, y) == pytest.approx(np.vdot(x, ty), rel=1e-10)


class TestActivations:
    def test_relu_values(self):
        out = ad.activation(Tensor([-2.0, 0.0, 3.0]), "relu").data
        np.testing.assert_allclose(out, [0.0, 0.0, 3.0])

    def test_tanh_values(self):
        out = ad.activation(Tensor([0.0, 1.0], dtype=np.float64), "tanh").data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(math.tanh(1.0), abs=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ad.activation(Tensor([1.0]), "gelu")


class TestBatchNorm:
    def test_train_mode_moments(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 6, 6, 3)))
        scale = Tensor(np.array([1.0, 2.0, -0.5]))
        shift = Tensor(np.array([0.0, 1.0, -1.0]))
        rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
        out = ad.batch_norm(x, scale, shift, rm, rv, mode="train").data
        for c in range(3):
            assert out[..., c].mean() == pytest.approx(shift.data[c], abs=1e-5)
            assert out[..., c].std() == pytest.approx(abs(scale.data[c]), abs=1e-5)

    def test_already_normalized_passthrough(self):
        rng = np.random.default_rng(6)
        raw = rng.normal(size=(8, 4, 4, 2))
        raw = (raw - raw.mean(axis=(0, 1, 2))) / raw.std(axis=(0, 1, 2))
        x = Tensor(raw, dtype=np.float64)
        rm, rv = np.zeros(2), np.ones(2)
        out = ad.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, mode="train").data
        np.testing.assert_allclose(out, raw, atol=1e-4)

    def test_eval_mode_matches_formula(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 3, 3, 2))
        rm = np.array([0.5, -1.0])
        rv = np.array([2.0, 0.25])
        gamma = np.array([1.5, 0.5])
        beta = np.array([0.1, -0.2])
        out = ad.batch_norm(Tensor(x, dtype=np.float64), Tensor(gamma), Tensor(beta), rm, rv, mode="eval").data
        want = (x - rm) / np.sqrt(rv + 1e-5) * gamma + beta
        np.testing.assert_allclose(out, want, atol=1e-6)

    def test_running_stats_update(self):
        x = Tensor(np.full((1, 2, 2, 1), 4.0))
        rm, rv = np.zeros(1, np.float64), np.ones(1, np.float64)
        ad.batch_norm(x, Tensor([1.0]), Tensor([0.0]), rm, rv, mode="train", momentum=0.9)
        assert rm[0] == pytest.approx(0.9 * 0.0 + 0.1 * 4.0)
        assert rv[0] == pytest.approx(0.9 * 1.0 + 0.1 * 0.0)


class TestMaxPool:
    def test_basic_block(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
        assert ad.max_pool(x).data.reshape(-1)[0] == 4.0

    def test_constant_input(self):
        x = Tensor(np.full((1, 4, 4, 2), 7.0))
        np.testing.assert_allclose(ad.max_pool(x).data, 7.0)

    def test_odd_extent_drops_trailing(self):
        x = Tensor(np.arange(25, dtype=np.float64).reshape(1, 5, 5, 1))
        out = ad.max_pool(x)
        assert out.shape == (1, 2, 2, 1)
        # Trailing row/col (indices 4) never participate.
        assert out.data.max() == 18.0

    def test_gradient_routes_to_first_argmax(self):
        x = Tensor(np.array([[2.0, 2.0], [1.0, 0.0]]).reshape(1, 2, 2, 1), requires_grad=True)
        out = ad.sum_all(ad.max_pool(x))
        ad.backward(out)
        np.testing.assert_allclose(x.grad.reshape(2, 2), [[1.0, 0.0], [0.0, 0.0]])


class TestGlobalAvgPool:
    def test_constant(self):
        x = Tensor(np.full((2, 3, 5, 4), 3.0))
        out = ad.global_avg_pool(x)
        assert out.shape == (2, 1, 1, 4)
        np.testing.assert_allclose(out.data, 3.0)

    def test_one_hot(self):
        x = np.zeros((1, 4, 4, 1))
        x[0, 1, 2, 0] = 1.0
        assert ad.global_avg_pool(Tensor(x)).data.reshape(-1)[0] == pytest.approx(1 / 16)

    def test_matches_flat_mean(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 5, 7, 3))
        got = ad.global_avg_pool(Tensor(x, dtype=np.float64)).data
        want = x.mean(axis=(1, 2), keepdims=True)
        np.testing.assert_allclose(got, want, atol=1e-6)


class TestBackward:
    def test_linear_sum(self):
        p = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        loss = ad.sum_all(2.0 * p)
        grads = ad.backward(loss, {"p": p})
        np.testing.assert_allclose(grads["p"], 2.0)

    def test_nonparticipating_leaf_gets_zeros(self):
        p = Tensor(np.ones(3), requires_grad=True)
        q = Tensor(np.ones(4), requires_grad=True)
        loss = ad.sum_all(p * p)
        grads = ad.backward(loss, {"p": p, "q": q})
        np.testing.assert_allclose(grads["q"], 0.0)
        np.testing.assert_allclose(grads["p"], 2.0)

    def test_non_scalar_loss_rejected(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            ad.backward(p * 2.0)

    def test_each_node_visited_once(self):
        p = Tensor(np.ones(4), requires_grad=True)
        q = p * 2.0
        # q feeds the loss through two paths; it must still be expanded once.
        loss = ad.sum_all(q * q + q)
        visits = {}

        def hook(node):
            visits[id(node)] = visits.get(id(node), 0) + 1

        ad.backward(loss, hook=hook)
        assert visits
        assert set(visits.values()) == {1}
        graph = ad.Graph(loss)
        assert len(visits) == len(graph)

    def test_reused_leaf_accumulates(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        loss = ad.sum_all(p * p)
        ad.backward(loss)
        assert p.grad[0] == pytest.approx(6.0)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 8, 8, 3)).astype(np.float32)
        w = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)

        def run():
            t = ad.conv2d(Tensor(x), Tensor(w), stride=2)
            return ad.tanh(t).data.tobytes()

        assert run() == run()


class TestGradCheck:
    def test_sum_of_squares(self):
        rng = np.random.default_rng(2)
        point = Tensor(rng.normal(size=(5,)))
        err = ad.grad_check(lambda t: ad.sum_all(t * t), point)
        assert err < 1e-8

    def test_relu_at_positive_point(self):
        point = Tensor(np.array([0.5, 1.2, 3.0]))
        err = ad.grad_check(lambda t: ad.sum_all(ad.relu(t)), point)
        assert err < 1e-6

    @pytest.mark.parametrize(
        "fn",
        [
            lambda t: ad.mean_all(ad.tanh(t)),
            lambda t: ad.sum_all(ad.sigmoid(t) * t),
            lambda t: ad.sum_all(ad.exp(t * 0.1)),
            lambda t: ad.sum_all(ad.log(t * t + 1.0)),
            lambda t: ad.sum_all(ad.reciprocal(t * t + 2.0)),
            lambda t: ad.mean_over(ad.clamp(t, -0.5, 0.5), axis=0, keepdims=False),
        ],
    )
    def test_elementwise_primitives(self, fn):
        rng = np.random.default_rng(4)
        point = Tensor(rng.normal(size=(6,)) * 0.3 + 1.0)
        assert ad.grad_check(fn, point, step=1e-5) < 1e-6

    def test_conv2d_gradients(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 5, 5, 2))
        w = Tensor(rng.normal(size=(3, 3, 2, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)

        err_x = ad.grad_check(lambda t: ad.sum_all(ad.tanh(ad.conv2d(t, w, b, stride=2))), Tensor(x), step=1e-5)
        assert err_x < 1e-6

        xt = Tensor(x, dtype=np.float64)
        err_w = ad.grad_check(lambda t: ad.sum_all(ad.tanh(ad.conv2d(xt, t, b, stride=2))), Tensor(w.data), step=1e-5)
        assert err_w < 1e-6

    def test_conv2d_transpose_gradients(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(1, 3, 3, 2))
        w = Tensor(rng.normal(size=(5, 5, 2, 3)) * 0.2, dtype=np.float64)
        err = ad.grad_check(lambda t: ad.sum_all(ad.tanh(ad.conv2d_transpose(t, w, stride=2))), Tensor(x), step=1e-5)
        assert err < 1e-6

    def test_batch_norm_train_gradients(self):
        # Positive random readout weights keep every input coordinate's
        # gradient well away from zero; a saturating readout would push some
        # coordinates to the finite-difference noise floor.
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 4, 4, 3))
        gamma = Tensor(rng.uniform(0.5, 1.5, size=3), dtype=np.float64)
        beta = Tensor(rng.normal(size=3), dtype=np.float64)
        r = Tensor(rng.uniform(0.5, 1.5, size=(2, 4, 4, 3)), dtype=np.float64)

        def fn(t):
            rm, rv = np.zeros(3), np.ones(3)
            return ad.sum_all(ad.batch_norm(t, gamma, beta, rm, rv, mode="train") * r)

        assert ad.grad_check(fn, Tensor(x), step=1e-5) < 1e-6

    def test_batch_norm_scale_shift_gradients(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(size=(2, 4, 4, 3)), dtype=np.float64)
        beta = Tensor(rng.normal(size=3), dtype=np.float64)

        def fn_gamma(t):
            rm, rv = np.zeros(3), np.ones(3)
            return ad.sum_all(ad.tanh(ad.batch_norm(x, t, beta, rm, rv, mode="train")))

        assert ad.grad_check(fn_gamma, Tensor(rng.uniform(0.5, 1.5, size=3)), step=1e-5) < 1e-6

    def test_max_pool_gradient(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(1, 6, 6, 2))
        err = ad.grad_check(lambda t: ad.sum_all(ad.tanh(ad.max_pool(t))), Tensor(x), step=1e-5)
        assert err < 1e-6

    def test_single_precision_tier(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(1, 5, 5, 2)).astype(np.float32)
        w = Tensor(rng.normal(size=(3, 3, 2, 2)).astype(np.float32))
        err = ad.grad_check(
            lambda t: ad.mean_all(ad.tanh(ad.conv2d(t, w))),
            Tensor(x),
            dtype=np.float32,
            step=1e-2,
        )
        assert err < 1e-3


class TestTensorBasics:
    def test_scalar_promoted_to_rank1(self):
        assert Tensor(3.0).shape == (1,)

    def test_rank5_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.array([1.0, np.nan]))

    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_numpy_float64_preserved(self):
        assert Tensor(np.zeros(3)).dtype == np.float64
