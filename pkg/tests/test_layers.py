import numpy as np
import pytest

import densevox.tensor as T
from densevox.layers import (DenseBlockSpec, composite_unit_forward,
                             dense_block_forward, plain_chain_forward,
                             receptive_field, transition_forward)


def make_unit(rng, k, cin, cout, scale=None):
    scale = np.sqrt(2.0 / (k ** 3 * cin)) if scale is None else scale
    return {
        "gamma": T.Tensor(np.ones(cin, np.float32), requires_grad=True),
        "beta": T.Tensor(np.zeros(cin, np.float32), requires_grad=True),
        "w": T.Tensor(rng.standard_normal((k, k, k, cin, cout)).astype(np.float32) * scale,
                      requires_grad=True),
        "b": T.Tensor(np.zeros(cout, np.float32), requires_grad=True),
        "run_mean": np.zeros(cin, np.float32),
        "run_var": np.ones(cin, np.float32),
    }


def block_units(rng, spec):
    return [make_unit(rng, spec.kernel, spec.width_at(l), spec.growth)
            for l in range(spec.num_layers)]


class TestReceptiveField:
    def test_empty_sequence(self):
        assert receptive_field([]) == 1

    def test_initial_conv(self):
        assert receptive_field([(3, 1)]) == 3

    def test_stage_one(self):
        assert receptive_field([(3, 1)] * 7) == 15

    def test_stage_two(self):
        assert receptive_field([(3, 1)] * 13) == 27

    def test_unit_kernel_adds_nothing(self):
        assert receptive_field([(3, 1)] * 7 + [(1, 1)]) == 15

    def test_strides_scale_growth(self):
        assert receptive_field([(3, 2), (3, 1)]) == 3 + 2 * 2

    def test_rejects_bad_entries(self):
        with pytest.raises(ValueError):
            receptive_field([(0, 1)])


class TestDenseBlockSpec:
    def test_stage1_channels(self):
        spec = DenseBlockSpec(num_layers=6, growth=12, kernel=3, input_channels=24)
        assert spec.output_channels == 96

    def test_stage2_channels(self):
        spec = DenseBlockSpec(num_layers=6, growth=12, kernel=3, input_channels=96)
        assert spec.output_channels == 168

    def test_width_progression(self):
        spec = DenseBlockSpec(num_layers=6, growth=12, kernel=3, input_channels=24)
        assert [spec.width_at(l) for l in range(7)] == [24, 36, 48, 60, 72, 84, 96]

    def test_shrinkage(self):
        spec = DenseBlockSpec(num_layers=6, growth=12, kernel=3, input_channels=24)
        assert spec.spatial_shrink == 12


class TestDenseBlockForward:
    def test_paper_widths_small_spatial(self):
        rng = np.random.default_rng(0)
        spec = DenseBlockSpec(num_layers=6, growth=12, kernel=3, input_channels=24)
        x0 = T.Tensor(rng.standard_normal((14, 14, 14, 24)).astype(np.float32))
        out = dense_block_forward(x0, spec, block_units(rng, spec), "train")
        assert out.shape == (2, 2, 2, 96)

    def test_spatial_shrink_36_to_24(self):
        rng = np.random.default_rng(1)
        spec = DenseBlockSpec(num_layers=6, growth=1, kernel=3, input_channels=1)
        x0 = T.Tensor(rng.standard_normal((36, 36, 36, 1)).astype(np.float32))
        out = dense_block_forward(x0, spec, block_units(rng, spec), "train")
        assert out.shape == (24, 24, 24, 7)

    def test_insufficient_extent_rejected(self):
        rng = np.random.default_rng(2)
        spec = DenseBlockSpec(num_layers=6, growth=2, kernel=3, input_channels=3)
        x0 = T.Tensor(rng.standard_normal((12, 12, 12, 3)).astype(np.float32))
        with pytest.raises(T.ShapeError, match=">= 13"):
            dense_block_forward(x0, spec, block_units(rng, spec), "train")

    def test_wrong_input_channels_rejected(self):
        rng = np.random.default_rng(3)
        spec = DenseBlockSpec(num_layers=2, growth=2, kernel=3, input_channels=3)
        x0 = T.Tensor(rng.standard_normal((8, 8, 8, 4)).astype(np.float32))
        with pytest.raises(T.ShapeError, match="channels"):
            dense_block_forward(x0, spec, block_units(rng, spec), "train")

    def test_growth_zero_degenerates_to_cropped_input(self):
        rng = np.random.default_rng(4)
        spec = DenseBlockSpec(num_layers=2, growth=0, kernel=3, input_channels=3)
        x0 = T.Tensor(rng.standard_normal((9, 9, 9, 3)).astype(np.float32))
        out = dense_block_forward(x0, spec, block_units(rng, spec), "train")
        assert out.shape == (5, 5, 5, 3)
        np.testing.assert_array_equal(out.data, x0.data[2:7, 2:7, 2:7])

    def test_gradient_reaches_block_input(self):
        rng = np.random.default_rng(5)
        spec = DenseBlockSpec(num_layers=2, growth=2, kernel=3, input_channels=2)
        x0 = T.Tensor(rng.standard_normal((8, 8, 8, 2)).astype(np.float32),
                      requires_grad=True)
        units = block_units(rng, spec)
        out = dense_block_forward(x0, spec, units, "train")
        T.backward(T.sum_all(out))
        assert x0.grad is not None and np.any(x0.grad != 0)
        for u in units:
            assert u["w"].grad is not None and np.any(u["w"].grad != 0)


class TestPlainChain:
    def test_matches_dense_block_geometry(self):
        # Table-4-style schedule: same output shape and receptive field as
        # the dense block it replaces
        rng = np.random.default_rng(6)
        dspec = DenseBlockSpec(num_layers=6, growth=12, kernel=3, input_channels=24)
        x0 = T.Tensor(rng.standard_normal((14, 14, 14, 24)).astype(np.float32))
        dense_out = dense_block_forward(x0, dspec, block_units(rng, dspec), "train")

        widths = [36, 48, 60, 72, 84, 96]
        units = [make_unit(rng, 3, cin, cout)
                 for cin, cout in zip([24] + widths[:-1], widths)]
        plain_out = plain_chain_forward(x0, widths, 3, units, "train")
        assert plain_out.shape == dense_out.shape
        # both blocks are six 3^3 stride-1 convolutions deep
        assert receptive_field([(3, 1)] * 6) == 13


class TestCompositeUnit:
    def test_order_is_bn_relu_conv(self):
        # with gamma=1, beta=0 and identity-like statistics, a negative input
        # channel is zeroed by the relu before the convolution sees it
        rng = np.random.default_rng(7)
        unit = make_unit(rng, 1, 1, 1)
        unit["w"] = T.Tensor(np.ones((1, 1, 1, 1, 1), np.float32))
        x = T.Tensor(np.array([-3.0, -1.0, 1.0, 3.0], np.float32).reshape(4, 1, 1, 1))
        out = composite_unit_forward(x, unit, "train")
        normalized = (x.data - x.data.mean()) / np.sqrt(x.data.var() + 1e-5)
        expect = np.maximum(normalized, 0.0)
        np.testing.assert_allclose(out.data, expect, atol=1e-6)


class TestTransition:
    def test_identity_kernel(self):
        rng = np.random.default_rng(8)
        x = T.Tensor(rng.standard_normal((5, 5, 5, 6)).astype(np.float32))
        w = T.Tensor(np.eye(6, dtype=np.float32).reshape(1, 1, 1, 6, 6))
        b = T.Tensor(np.zeros(6, np.float32))
        out = transition_forward(x, w, b)
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_preserves_shape(self):
        rng = np.random.default_rng(9)
        for c in (96, 168):
            x = T.Tensor(rng.standard_normal((3, 4, 5, c)).astype(np.float32))
            w = T.Tensor(rng.standard_normal((1, 1, 1, c, c)).astype(np.float32) * 0.1)
            b = T.Tensor(np.zeros(c, np.float32))
            assert transition_forward(x, w, b).shape == (3, 4, 5, c)

    def test_channel_mismatch_rejected(self):
        x = T.Tensor(np.zeros((3, 3, 3, 4), np.float32))
        w = T.Tensor(np.zeros((1, 1, 1, 4, 5), np.float32))
        with pytest.raises(T.ShapeError):
            transition_forward(x, w, T.Tensor(np.zeros(5, np.float32)))
