"""Kernel-level tests: convolutions, normalization folding, heads, serialization."""

import numpy as np
import pytest

from repstream.errors import ContractError, NumericError
from repstream.tensor import (
    BatchNormParams,
    ConvWeights,
    TensorND,
    classify_head,
    conv2d,
    conv_forward,
    fold_batchnorm,
    load_tensor,
    save_tensor,
    softmax,
    temporal_pointwise_conv,
)

from util import naive_conv, rel_err


def _w(kernel, bias=None, groups=1, s=(1, 1), st=1, pad="same"):
    return ConvWeights(np.asarray(kernel, dtype=np.float64), bias, groups, s, st, pad)


class TestTensorND:
    def test_invariants(self):
        t = TensorND(np.zeros((2, 3), dtype=np.float32), "CT")
        assert t.shape == (2, 3)
        assert t.axis("T") == 1

    def test_rejects_duplicate_axes(self):
        with pytest.raises(ContractError):
            TensorND(np.zeros((2, 2), dtype=np.float32), "CC")

    def test_rejects_rank_mismatch(self):
        with pytest.raises(ContractError):
            TensorND(np.zeros((2, 2), dtype=np.float32), "CTH")

    def test_rejects_unknown_tags(self):
        with pytest.raises(ContractError):
            TensorND(np.zeros(2, dtype=np.float32), "X")

    def test_rejects_integer_dtype(self):
        with pytest.raises(ContractError):
            TensorND(np.zeros(2, dtype=np.int32), "C")

    def test_roundtrip_serialization(self, tmp_path):
        rng = np.random.default_rng(0)
        t = TensorND(rng.random((2, 5, 4, 3)).astype(np.float32), "CTHW")
        path = tmp_path / "t.ndt"
        save_tensor(path, t)
        back = load_tensor(path)
        assert back.axes == "CTHW"
        np.testing.assert_array_equal(back.data, t.data)

    def test_load_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ndt"
        p.write_bytes(b"XXXX1234")
        with pytest.raises(ContractError):
            load_tensor(p)


class TestConv2d:
    def test_ones_image_ones_kernel(self):
        # against the naive direct-convolution oracle and by hand:
        # center sees all 9 taps, corners see 4
        x = np.ones((1, 1, 3, 3), dtype=np.float64)
        w = _w(np.ones((1, 1, 1, 3, 3)))
        y = conv2d(TensorND(x, "CTHW"), w).data
        expected, _ = naive_conv(x, w)
        np.testing.assert_allclose(y, expected)
        assert y[0, 0, 1, 1] == 9
        assert y[0, 0, 0, 0] == 4
        assert y[0, 0, 0, 2] == 4

    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.random((1, 4, 5, 5))
        w = _w(np.ones((1, 1, 1, 1, 1)), np.zeros(1))
        y = conv2d(TensorND(x, "CTHW"), w).data
        np.testing.assert_array_equal(y, x)

    def test_valid_stride2_shape(self):
        # floor((4 - 3) / 2) + 1 == 1
        x = np.zeros((1, 1, 4, 4))
        w = _w(np.zeros((1, 1, 1, 3, 3)), s=(2, 2), pad="valid")
        y = conv2d(TensorND(x, "CTHW"), w).data
        assert y.shape == (1, 1, 1, 1)

    def test_batched_axes(self):
        rng = np.random.default_rng(2)
        x = rng.random((2, 1, 3, 4, 4))
        w = _w(rng.normal(size=(2, 1, 1, 3, 3)))
        y = conv2d(TensorND(x, "NCTHW"), w)
        assert y.axes == "NCTHW"
        assert y.shape == (2, 2, 3, 4, 4)

    def test_rejects_temporal_kernel(self):
        w = _w(np.zeros((1, 1, 3, 1, 1)))
        with pytest.raises(ContractError):
            conv2d(TensorND(np.zeros((1, 2, 2, 2)), "CTHW"), w)

    def test_channel_mismatch_names_axis(self):
        w = _w(np.zeros((1, 2, 1, 1, 1)))
        with pytest.raises(ContractError, match="axis C"):
            conv2d(TensorND(np.zeros((1, 2, 2, 2)), "CTHW"), w)

    def test_valid_padding_too_small_errors(self):
        w = _w(np.zeros((1, 1, 1, 5, 5)), pad="valid")
        with pytest.raises(ContractError, match="axis H"):
            conv2d(TensorND(np.zeros((1, 1, 3, 8)), "CTHW"), w)

    def test_matches_naive_oracle_random(self):
        rng = np.random.default_rng(3)
        for _ in range(8):
            C = int(rng.integers(1, 4))
            g = int(rng.choice([1, C]))
            O = g * int(rng.integers(1, 3))
            k = int(rng.choice([1, 3]))
            w = ConvWeights(
                rng.normal(size=(O, C // g, 1, k, k)),
                rng.normal(size=O),
                g,
                (int(rng.choice([1, 2])),) * 2,
                1,
                str(rng.choice(["same", "valid"])),
            )
            x = rng.random((C, int(rng.integers(1, 4)), 6, 6))
            got = conv_forward(x, w)
            want, _ = naive_conv(x, w)
            assert rel_err(got, want) < 1e-12


class TestTemporalPointwiseConv:
    def test_identity_tap(self):
        rng = np.random.default_rng(4)
        x = rng.random((2, 6, 3, 3))
        kernel = np.zeros((2, 2, 3, 1, 1))
        kernel[:, :, 2] = np.eye(2)[:, :, None, None]  # newest tap is identity
        w = _w(kernel)
        y = temporal_pointwise_conv(TensorND(x, "CTHW"), w).data
        np.testing.assert_allclose(y, x, rtol=0, atol=1e-15)

    def test_causal_cumsum_taps(self):
        # taps (1,1,1) with zero history: [1, 2, 3] -> [1, 3, 6]
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)
        w = _w(np.ones((1, 1, 3, 1, 1)))
        y = temporal_pointwise_conv(TensorND(x, "CTHW"), w).data
        np.testing.assert_allclose(y[0, :, 0, 0], [1, 3, 6])

    def test_stride2_length_chain(self):
        rng = np.random.default_rng(5)
        x = rng.random((1, 63, 2, 2))
        w = _w(rng.normal(size=(1, 1, 3, 1, 1)), st=2)
        y1 = temporal_pointwise_conv(TensorND(x, "CTHW"), w).data
        assert y1.shape[1] == 32
        y2 = temporal_pointwise_conv(TensorND(y1, "CTHW"), w).data
        assert y2.shape[1] == 16

    def test_empty_time_axis(self):
        w = _w(np.zeros((1, 1, 3, 1, 1)))
        y = temporal_pointwise_conv(TensorND(np.zeros((1, 0, 2, 2)), "CTHW"), w).data
        assert y.shape == (1, 0, 2, 2)

    def test_rejects_spatial_kernel(self):
        w = _w(np.zeros((1, 1, 3, 3, 3)))
        with pytest.raises(ContractError):
            temporal_pointwise_conv(TensorND(np.zeros((1, 2, 4, 4)), "CTHW"), w)

    def test_rejects_stride_3(self):
        w = _w(np.zeros((1, 1, 3, 1, 1)), st=3)
        with pytest.raises(ContractError):
            temporal_pointwise_conv(TensorND(np.zeros((1, 2, 2, 2)), "CTHW"), w)


class TestConvProperties:
    def test_causality(self):
        # zeroing frames after index k never changes outputs mapping to <= k
        rng = np.random.default_rng(6)
        x = rng.random((2, 12, 3, 3))
        w = ConvWeights(rng.normal(size=(2, 2, 3, 1, 1)), None, 1, (1, 1), 2, "same")
        full = conv_forward(x, w)
        for k in (3, 7):
            cut = x.copy()
            cut[:, k + 1 :] = 0
            got = conv_forward(cut, w)
            keep = [t for t in range(full.shape[1]) if 2 * t <= k]
            np.testing.assert_array_equal(got[:, keep], full[:, keep])

    def test_linearity_zero_bias(self):
        rng = np.random.default_rng(7)
        w = ConvWeights(rng.normal(size=(3, 2, 3, 3, 3)), None, 1, (1, 1), 1, "same")
        x = rng.random((2, 5, 6, 6))
        y = rng.random((2, 5, 6, 6))
        a, b = 0.7, -1.3
        lhs = conv_forward(a * x + b * y, w)
        rhs = a * conv_forward(x, w) + b * conv_forward(y, w)
        assert rel_err(lhs, rhs) < 1e-6

    def test_output_length_all_T(self):
        w1 = _w(np.ones((1, 1, 3, 1, 1)), st=1)
        w2 = _w(np.ones((1, 1, 3, 1, 1)), st=2)
        for T in range(1, 129):
            x = np.zeros((1, T, 1, 1))
            assert conv_forward(x, w1).shape[1] == T
            assert conv_forward(x, w2).shape[1] == -(-T // 2)


class TestFoldBatchnorm:
    def test_identity_normalization(self):
        rng = np.random.default_rng(8)
        w = _w(rng.normal(size=(3, 2, 1, 3, 3)), rng.normal(size=3))
        bn = BatchNormParams(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=0.0)
        folded = fold_batchnorm(w, bn)
        np.testing.assert_array_equal(folded.kernel, w.kernel)
        np.testing.assert_array_equal(folded.bias, w.bias)

    def test_scale_two_doubles(self):
        rng = np.random.default_rng(9)
        w = _w(rng.normal(size=(2, 1, 1, 1, 1)), rng.normal(size=2))
        bn = BatchNormParams(np.full(2, 2.0), np.zeros(2), np.zeros(2), np.ones(2), eps=0.0)
        folded = fold_batchnorm(w, bn)
        np.testing.assert_allclose(folded.kernel, 2 * w.kernel)
        np.testing.assert_allclose(folded.bias, 2 * w.bias)

    def test_matches_unfused_composition(self):
        rng = np.random.default_rng(10)
        w = _w(rng.normal(size=(4, 3, 1, 3, 3)), rng.normal(size=4))
        bn = BatchNormParams(
            rng.uniform(0.5, 2, 4), rng.normal(size=4),
            rng.normal(size=4), rng.uniform(0.2, 3, 4), eps=1e-5,
        )
        x = rng.random((3, 2, 5, 5))
        unfused = conv_forward(x, w)
        factor = (bn.scale / np.sqrt(bn.var + bn.eps))[:, None, None, None]
        unfused = (unfused - bn.mean[:, None, None, None]) * factor + bn.shift[:, None, None, None]
        fused = conv_forward(x, fold_batchnorm(w, bn))
        assert rel_err(fused, unfused) < 1e-6

    def test_nonpositive_variance_raises(self):
        w = _w(np.ones((1, 1, 1, 1, 1)))
        bn = BatchNormParams(np.ones(1), np.zeros(1), np.zeros(1), np.array([-1.0]), eps=0.5)
        with pytest.raises(NumericError):
            fold_batchnorm(w, bn)

    def test_channel_mismatch(self):
        w = _w(np.ones((2, 1, 1, 1, 1)))
        bn = BatchNormParams(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3))
        with pytest.raises(ContractError):
            fold_batchnorm(w, bn)


class TestClassifyHead:
    def test_zero_logits_uniform_40(self):
        feats = TensorND(np.zeros((8, 4, 2, 2), dtype=np.float32), "CTHW")
        probs = classify_head(feats, np.zeros((40, 8)), np.zeros(40), "clip_softmax")
        np.testing.assert_allclose(probs, 0.025)

    def test_temporal_head_one_distribution_per_step(self):
        rng = np.random.default_rng(11)
        feats = TensorND(rng.random((8, 16, 2, 2)).astype(np.float32), "CTHW")
        probs = classify_head(feats, rng.normal(size=(5, 8)), rng.normal(size=5), "temporal")
        assert probs.shape == (16, 5)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(probs >= 0) and np.all(np.isfinite(probs))

    def test_num_classes_matches_taxonomy(self):
        from repstream.datasets import video_classes

        assert len(video_classes()) == 40

    def test_rejects_single_class(self):
        feats = TensorND(np.zeros((4, 2, 2, 2), dtype=np.float32), "CTHW")
        with pytest.raises(ContractError):
            classify_head(feats, np.zeros((1, 4)), np.zeros(1), "clip_softmax")

    def test_nonfinite_logits_numeric_error(self):
        with pytest.raises(NumericError, match="head.fc"):
            softmax(np.array([np.inf, 0.0]), context="head.fc")


class TestAccumulation:
    def test_float32_storage_float64_accumulation(self):
        # catastrophic-cancellation pattern survives in a float32 conv because
        # the accumulator is float64
        big = np.float32(3e7)
        x = np.array([big, 1.0, -big], dtype=np.float32).reshape(3, 1, 1, 1)
        w = ConvWeights(
            np.ones((1, 3, 1, 1, 1), dtype=np.float32), None, 1, (1, 1), 1, "same"
        )
        y = conv_forward(x, w)
        assert y[0, 0, 0, 0] == np.float32(1.0)
