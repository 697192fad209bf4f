import numpy as np
import pytest

import densevox.tensor as T
from densevox.train import cross_entropy

from oracles import numeric_gradient, gradient_mismatch

GRAD_TOL = 1e-4
FD_STEP = 1e-3
N_SEEDS = 20


def leaf(rng, shape, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def check_grads(build_loss, tensors, step=FD_STEP, tol=GRAD_TOL):
    """Analytic grads from the graph vs central differences, all in float64."""
    loss = build_loss()
    T.backward(loss)
    for t in tensors:
        def f(x, t=t):
            keep = t.data
            t.data = x
            try:
                return float(build_loss().data)
            finally:
                t.data = keep
        num = numeric_gradient(f, t.data.copy(), step=step)
        assert t.grad is not None, f"no gradient reached {t}"
        rel = gradient_mismatch(t.grad, num)
        assert rel < tol, f"gradient mismatch {rel:.3e} for {t}"


class TestForwardSemantics:
    def test_relu_definition(self):
        x = T.Tensor(np.array([-1.5, 2.0, 0.0], np.float32))
        out = T.relu(x)
        np.testing.assert_array_equal(out.data, [0.0, 2.0, 0.0])

    def test_concat_widths(self):
        rng = np.random.default_rng(0)
        a = T.Tensor(rng.standard_normal((4, 4, 4, 96)).astype(np.float32))
        b = T.Tensor(rng.standard_normal((4, 4, 4, 96)).astype(np.float32))
        out = T.concat_channels(a, b)
        assert out.shape == (4, 4, 4, 192)
        np.testing.assert_array_equal(out.data[..., :96], a.data)
        np.testing.assert_array_equal(out.data[..., 96:], b.data)

    def test_concat_shape_mismatch(self):
        a = T.Tensor(np.zeros((2, 2, 2, 3), np.float32))
        b = T.Tensor(np.zeros((2, 2, 3, 3), np.float32))
        with pytest.raises(T.ShapeError):
            T.concat_channels(a, b)

    def test_add_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 2))))

    def test_softmax_uniform(self):
        x = T.Tensor(np.full((2, 2, 2, 4), 3.25, np.float32))
        out = T.softmax_channels(x)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_softmax_normalized_and_bounded(self):
        rng = np.random.default_rng(1)
        for seed in range(N_SEEDS):
            x = T.Tensor(rng.standard_normal((3, 3, 3, 5)) * 10)
            out = T.softmax_channels(x).data
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_crop_center_margins(self):
        x = T.Tensor(np.arange(24 ** 3 * 2, dtype=np.float32).reshape(24, 24, 24, 2))
        out = T.crop_center(x, (12, 12, 12))
        np.testing.assert_array_equal(out.data, x.data[6:18, 6:18, 6:18])

    def test_crop_identity_and_single_voxel(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.standard_normal((3, 3, 3, 1)).astype(np.float32))
        same = T.crop_center(x, (3, 3, 3))
        np.testing.assert_array_equal(same.data, x.data)
        mid = T.crop_center(x, (1, 1, 1))
        np.testing.assert_array_equal(mid.data[0, 0, 0], x.data[1, 1, 1])

    def test_crop_rejects_odd_margin(self):
        x = T.Tensor(np.zeros((5, 5, 5, 1), np.float32))
        with pytest.raises(T.ShapeError):
            T.crop_center(x, (4, 4, 4))
        with pytest.raises(T.ShapeError):
            T.crop_center(x, (7, 7, 7))

    def test_conv_rejects_bad_shapes(self):
        x = T.Tensor(np.zeros((4, 4, 4, 3), np.float32))
        w = T.Tensor(np.zeros((3, 3, 3, 2, 5), np.float32))
        b = T.Tensor(np.zeros(5, np.float32))
        with pytest.raises(T.ShapeError, match="channel mismatch"):
            T.conv3d_valid(x, w, b)
        wbig = T.Tensor(np.zeros((5, 5, 5, 3, 2), np.float32))
        with pytest.raises(T.ShapeError, match="exceeds"):
            T.conv3d_valid(x, wbig, T.Tensor(np.zeros(2, np.float32)))

    def test_batch_norm_fixed_point(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 4, 4, 3)).astype(np.float32)
        x = (x - x.mean(axis=(0, 1, 2, 3))) / x.std(axis=(0, 1, 2, 3))
        xt = T.Tensor(x)
        gamma = T.Tensor(np.ones(3, np.float32))
        beta = T.Tensor(np.zeros(3, np.float32))
        out = T.batch_norm(xt, gamma, beta, np.zeros(3, np.float32),
                           np.ones(3, np.float32), "train")
        assert np.abs(out.data - x).max() < 1e-4

    def test_batch_norm_gamma_zero_gives_beta(self):
        rng = np.random.default_rng(4)
        x = T.Tensor(rng.standard_normal((2, 3, 3, 3, 2)).astype(np.float32))
        gamma = T.Tensor(np.zeros(2, np.float32))
        beta = T.Tensor(np.array([0.5, -1.25], np.float32))
        out = T.batch_norm(x, gamma, beta, np.zeros(2, np.float32),
                           np.ones(2, np.float32), "train")
        np.testing.assert_allclose(out.data[..., 0], 0.5, atol=1e-7)
        np.testing.assert_allclose(out.data[..., 1], -1.25, atol=1e-7)

    def test_batch_norm_statistics(self):
        rng = np.random.default_rng(5)
        x = T.Tensor(rng.standard_normal((2, 4, 4, 4, 3)).astype(np.float32) * 3 + 1)
        gamma = T.Tensor(np.ones(3, np.float32))
        beta = T.Tensor(np.zeros(3, np.float32))
        out = T.batch_norm(x, gamma, beta, np.zeros(3, np.float32),
                           np.ones(3, np.float32), "train").data
        # recompute statistics independently
        assert np.abs(out.mean(axis=(0, 1, 2, 3))).max() < 1e-4
        assert np.abs(out.std(axis=(0, 1, 2, 3)) - 1).max() < 1e-4

    def test_batch_norm_running_stats_and_infer(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 3, 3, 3, 2)).astype(np.float32) * 2 + 5
        rm = np.zeros(2, np.float32)
        rv = np.ones(2, np.float32)
        gamma = T.Tensor(np.ones(2, np.float32))
        beta = T.Tensor(np.zeros(2, np.float32))
        T.batch_norm(T.Tensor(x), gamma, beta, rm, rv, "train")
        mean = x.mean(axis=(0, 1, 2, 3))
        var = x.var(axis=(0, 1, 2, 3))
        np.testing.assert_allclose(rm, 0.1 * mean, rtol=1e-5)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * var, rtol=1e-5)
        out = T.batch_norm(T.Tensor(x), gamma, beta, rm, rv, "infer").data
        expect = (x - rm) / np.sqrt(rv + 1e-5)
        np.testing.assert_allclose(out, expect, atol=1e-5)

    def test_batch_norm_zero_variance_channel(self):
        x = T.Tensor(np.ones((2, 3, 3, 3, 1), np.float32) * 7)
        out = T.batch_norm(x, T.Tensor(np.ones(1, np.float32)),
                           T.Tensor(np.zeros(1, np.float32)),
                           np.zeros(1, np.float32), np.ones(1, np.float32),
                           "train")
        assert np.all(np.isfinite(out.data))

    def test_batch_norm_single_sample_rejected(self):
        x = T.Tensor(np.ones((1, 1, 1, 1, 3), np.float32))
        with pytest.raises(T.ShapeError, match=">= 2 samples"):
            T.batch_norm(x, T.Tensor(np.ones(3, np.float32)),
                         T.Tensor(np.zeros(3, np.float32)),
                         np.zeros(3, np.float32), np.ones(3, np.float32),
                         "train")

    def test_assert_finite_scan(self):
        good = T.Tensor(np.ones(4, np.float32))
        assert good.assert_finite() is good
        bad = T.Tensor(np.array([1.0, np.inf], np.float32))
        with pytest.raises(FloatingPointError):
            bad.assert_finite("scores")

    def test_no_grad_skips_graph(self):
        x = T.Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        with T.no_grad():
            out = T.relu(x)
        assert out._backward is None and not out.requires_grad


class TestBackward:
    def test_relu_positive_grads_all_ones(self):
        x = T.Tensor(np.full((3, 3), 2.0, np.float32), requires_grad=True)
        loss = T.sum_all(T.relu(x))
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 3), np.float32))

    def test_two_consumers_grads_add(self):
        x = T.Tensor(np.ones((2, 2), np.float32) * 3, requires_grad=True)
        y = T.add(T.relu(x), T.relu(x))
        T.backward(T.sum_all(y))
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0, np.float32))

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        with pytest.raises(T.ShapeError):
            T.backward(T.relu(x))

    def test_unreached_parameter_grad_stays_zero(self):
        x = T.Tensor(np.ones(3, np.float32), requires_grad=True)
        other = T.Tensor(np.ones(3, np.float32), requires_grad=True)
        other.zero_grad()
        T.backward(T.sum_all(T.relu(x)))
        np.testing.assert_array_equal(other.grad, np.zeros(3, np.float32))

    def test_crop_grad_mass_conserved(self):
        rng = np.random.default_rng(7)
        x = leaf(rng, (8, 8, 8, 3))
        out = T.crop_center(x, (4, 4, 4))
        T.backward(T.sum_all(out))
        assert x.grad.sum() == pytest.approx(out.data.size, rel=1e-6)
        assert np.all(x.grad[2:6, 2:6, 2:6] == 1.0)
        assert x.grad.sum() == x.grad[2:6, 2:6, 2:6].sum()

    def test_concat_then_slice_roundtrip(self):
        rng = np.random.default_rng(8)
        a = leaf(rng, (3, 3, 3, 2))
        b = leaf(rng, (3, 3, 3, 5))
        out = T.concat_channels(a, b)
        np.testing.assert_array_equal(out.data[..., :2], a.data)
        np.testing.assert_array_equal(out.data[..., 2:], b.data)


class TestGradientChecks:
    """Central finite differences in float64 against every differentiable op."""

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_conv3d(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = leaf(rng, (4, 5, 6, 2), 0.5)
        w = leaf(rng, (3, 3, 3, 2, 3), 0.5)
        b = leaf(rng, (3,), 0.5)
        check_grads(lambda: T.sum_all(T.conv3d_valid(x, w, b)), [x, w, b])

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_conv3d_k1(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = leaf(rng, (3, 3, 3, 4), 0.5)
        w = leaf(rng, (1, 1, 1, 4, 2), 0.5)
        b = leaf(rng, (2,), 0.5)
        check_grads(lambda: T.sum_all(T.conv3d_valid(x, w, b)), [x, w, b])

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_batch_norm(self, seed):
        rng = np.random.default_rng(300 + seed)
        x = leaf(rng, (2, 3, 3, 3, 2), 1.0)
        gamma = leaf(rng, (2,), 1.0)
        beta = leaf(rng, (2,), 1.0)
        w = T.Tensor(rng.standard_normal((2, 3, 3, 3, 2)))

        def build():
            rm = np.zeros(2)
            rv = np.ones(2)
            out = T.batch_norm(x, gamma, beta, rm, rv, "train")
            return T.sum_all(_mul(out, w))

        check_grads(build, [x, gamma, beta])

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_relu(self, seed):
        rng = np.random.default_rng(400 + seed)
        data = rng.standard_normal((4, 4))
        data[np.abs(data) < 0.05] += 0.1  # keep clear of the kink
        x = T.Tensor(data, requires_grad=True)
        check_grads(lambda: T.sum_all(T.relu(x)), [x])

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_softmax(self, seed):
        rng = np.random.default_rng(500 + seed)
        x = leaf(rng, (2, 2, 2, 4), 1.0)
        w = T.Tensor(rng.standard_normal((2, 2, 2, 4)))

        def build():
            # weighted sum keeps per-channel structure in the pullback
            return T.sum_all(_mul(T.softmax_channels(x), w))

        check_grads(build, [x])

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_concat_add_crop(self, seed):
        rng = np.random.default_rng(600 + seed)
        a = leaf(rng, (5, 5, 5, 2), 1.0)
        b = leaf(rng, (5, 5, 5, 3), 1.0)

        def build():
            cat = T.concat_channels(a, b)
            cropped = T.crop_center(cat, (3, 3, 3))
            return T.sum_all(T.add(cropped, cropped))

        check_grads(build, [a, b])

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_cross_entropy(self, seed):
        rng = np.random.default_rng(700 + seed)
        scores = leaf(rng, (2, 3, 3, 3, 4), 1.0)
        targets = rng.integers(0, 4, size=(2, 3, 3, 3))
        check_grads(lambda: cross_entropy(scores, targets), [scores], tol=1e-4)

    def test_conv3d_finite_difference_spec_shape(self):
        # the [5,5,5,2] -> [3,3,3,3] layer called out in the contract
        rng = np.random.default_rng(42)
        x = leaf(rng, (5, 5, 5, 2), 0.5)
        w = leaf(rng, (3, 3, 3, 2, 3), 0.5)
        b = leaf(rng, (3,), 0.5)
        check_grads(lambda: T.sum_all(T.conv3d_valid(x, w, b)), [x, w, b])


def _mul(a, b):
    """Elementwise product op used only by tests (b constant)."""
    out = a.data * b.data

    def backward_fn(gy):
        if a.requires_grad:
            a.accumulate(gy * b.data)

    return T._make(out, (a,), backward_fn)
