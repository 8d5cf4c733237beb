"""Tensor kernel tests, each checked against an independent oracle."""

import math

import numpy as np
import pytest

from vidattr.errors import ContractError, ParameterError
from vidattr import tensor_ops as tops


def conv3d_oracle(m, k, stride_t, stride_s, padding):
    """Naive triple-loop strided cross-correlation."""
    if padding:
        m = np.pad(m, padding)
    kt, kh, kw = k.shape
    ot = (m.shape[0] - kt) // stride_t + 1
    oh = (m.shape[1] - kh) // stride_s + 1
    ow = (m.shape[2] - kw) // stride_s + 1
    out = np.zeros((ot, oh, ow))
    for a in range(ot):
        for b in range(oh):
            for c in range(ow):
                acc = 0.0
                for u in range(kt):
                    for v in range(kh):
                        for w in range(kw):
                            acc += m[a * stride_t + u, b * stride_s + v, c * stride_s + w] * k[u, v, w]
                out[a, b, c] = acc
    return out


def merge_sort_desc(values):
    """Library-independent descending merge sort."""
    values = list(values)
    if len(values) <= 1:
        return values
    mid = len(values) // 2
    left, right = merge_sort_desc(values[:mid]), merge_sort_desc(values[mid:])
    out, i, j = [], 0, 0
    while i < len(left) and j < len(right):
        if left[i] >= right[j]:
            out.append(left[i]); i += 1
        else:
            out.append(right[j]); j += 1
    return out + left[i:] + right[j:]


class TestHadamard:
    def test_identity(self):
        x = np.random.default_rng(0).random((2, 4, 4, 1))
        np.testing.assert_array_equal(tops.hadamard(np.ones_like(x), x), x)

    def test_zeros(self):
        x = np.random.default_rng(1).random((2, 4, 4, 3))
        np.testing.assert_array_equal(tops.hadamard(np.zeros_like(x), x), np.zeros_like(x))

    def test_direct_values(self):
        np.testing.assert_array_equal(
            tops.hadamard(np.array([0.5, 2.0]), np.array([4.0, 3.0])),
            np.array([2.0, 6.0]),
        )

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            tops.hadamard(np.ones((2, 3)), np.ones((3, 2)))


class TestGaussianBlur:
    def test_constant_preserved(self):
        x = np.full((2, 16, 16, 1), 0.37)
        out = tops.gaussian_blur2d(x, sigma=2.5)
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_impulse_matches_kernel(self):
        # response to a centered impulse is the outer product of the 1-d kernel
        x = np.zeros((1, 21, 21))
        x[0, 10, 10] = 1.0
        out = tops.gaussian_blur2d(x, sigma=1.0)
        k = tops.gaussian_kernel1d(1.0)
        hw = (k.size - 1) // 2
        expect = np.zeros((21, 21))
        expect[10 - hw:10 + hw + 1, 10 - hw:10 + hw + 1] = np.outer(k, k)
        np.testing.assert_allclose(out[0], expect, atol=1e-15)
        assert abs(out.sum() - 1.0) < 1e-12

    def test_mean_preserved_interior(self):
        rng = np.random.default_rng(7)
        x = np.full((1, 32, 32), 0.5)
        x[0, 12:20, 12:20] += rng.random((8, 8)) * 0.1
        out = tops.gaussian_blur2d(x, sigma=1.5)
        assert abs(out.mean() - x.mean()) < 1e-9

    def test_linearity(self):
        rng = np.random.default_rng(8)
        x, y = rng.random((2, 12, 12, 3)), rng.random((2, 12, 12, 3))
        a, b = 0.7, -1.3
        lhs = tops.gaussian_blur2d(a * x + b * y, 2.0)
        rhs = a * tops.gaussian_blur2d(x, 2.0) + b * tops.gaussian_blur2d(y, 2.0)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_bad_sigma(self):
        with pytest.raises(ParameterError):
            tops.gaussian_blur2d(np.zeros((1, 4, 4)), 0.0)

    def test_wide_kernel_small_frame(self):
        x = np.full((1, 8, 8), 0.25)
        np.testing.assert_allclose(tops.gaussian_blur2d(x, 10.0), x, atol=1e-12)


class TestConv3d:
    def test_normalized_kernel_on_ones(self):
        k = np.full((3, 3, 3), 1.0 / 27.0)
        out = tops.conv3d(np.ones((4, 6, 6)), k)
        np.testing.assert_allclose(out, np.ones_like(out), atol=1e-12)

    def test_identity_kernel(self):
        rng = np.random.default_rng(3)
        m = rng.random((3, 5, 5))
        out = tops.conv3d(m, np.ones((1, 1, 1)))
        np.testing.assert_array_equal(out, m)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(4)
        m = rng.random((4, 8, 8))
        k = rng.random((3, 3, 3))
        for st, ss, pad in [(1, 1, 0), (2, 3, 0), (1, 2, 1), (2, 2, 2)]:
            got = tops.conv3d(m, k, st, ss, pad)
            want = conv3d_oracle(m, k, st, ss, pad)
            assert got.shape == want.shape
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(ParameterError):
            tops.conv3d(np.ones((2, 4, 4)), np.ones((3, 3, 3)))

    def test_range_preserved_for_normalized_kernel(self):
        rng = np.random.default_rng(5)
        m = rng.random((5, 9, 9))
        k = np.full((3, 3, 3), 1.0 / 27.0)
        out = tops.conv3d(m, k)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_adjoint_is_true_adjoint(self):
        # <conv(m), g> == <m, adjoint(g)> for random m, g
        rng = np.random.default_rng(6)
        m = rng.random((4, 7, 7))
        k = rng.random((2, 3, 3))
        for st, ss, pad in [(1, 1, 0), (2, 2, 1)]:
            out = tops.conv3d(m, k, st, ss, pad)
            g = rng.random(out.shape)
            lhs = float((out * g).sum())
            rhs = float((m * tops.conv3d_adjoint(g, k, m.shape, st, ss, pad)).sum())
            assert abs(lhs - rhs) < 1e-10


class TestVecsort:
    def test_simple(self):
        np.testing.assert_array_equal(
            tops.vecsort(np.array([0.2, 0.9, 0.5])), np.array([0.9, 0.5, 0.2])
        )

    def test_constant(self):
        np.testing.assert_array_equal(tops.vecsort(np.full((2, 3), 0.4)), np.full(6, 0.4))

    def test_matches_merge_sort_oracle(self):
        rng = np.random.default_rng(9)
        m = rng.random(1000)
        np.testing.assert_array_equal(tops.vecsort(m), np.array(merge_sort_desc(m)))

    def test_permutation_property(self):
        rng = np.random.default_rng(10)
        m = rng.integers(0, 5, size=(3, 4, 4)).astype(float) / 5.0
        out = tops.vecsort(m)
        assert sorted(out.tolist()) == sorted(m.ravel().tolist())

    def test_stable_order(self):
        m = np.array([0.5, 0.9, 0.5, 0.1])
        order = tops.descending_order(m)
        np.testing.assert_array_equal(order, [1, 0, 2, 3])


class TestUpsampleSmooth:
    def test_constant_seed(self):
        seed = np.full((2, 3, 3), 0.5)
        out = tops.upsample_smooth(seed, factor=4)
        assert out.shape == (2, 12, 12)
        np.testing.assert_allclose(out, 0.5, atol=1e-12)

    def test_identity_limit(self):
        rng = np.random.default_rng(11)
        seed = rng.random((2, 5, 5))
        out = tops.upsample_smooth(seed, factor=1, smooth_sigma=1e-9)
        np.testing.assert_allclose(out, seed, atol=1e-12)

    def test_impulse_argmax_by_enumeration(self):
        seed = np.zeros((1, 7, 7))
        seed[0, 3, 3] = 1.0
        out = tops.upsample_smooth(seed, factor=7)
        t, i, j = np.unravel_index(np.argmax(out), out.shape)
        # seed cell (p, q) maps to pixel (7p + 3, 7q + 3)
        assert (t, i, j) == (0, 3 * 7 + 3, 3 * 7 + 3)
        # unimodal along each axis through the peak
        row = out[0, :, j]
        assert np.all(np.diff(row[:i]) > 0) and np.all(np.diff(row[i:]) < 0)

    def test_impulse_near_border_stays_close(self):
        # row normalization shifts near-border peaks by at most one pixel
        seed = np.zeros((1, 5, 5))
        seed[0, 2, 3] = 1.0
        out = tops.upsample_smooth(seed, factor=7)
        t, i, j = np.unravel_index(np.argmax(out), out.shape)
        assert (t, i) == (0, 17) and abs(j - 24) <= 1

    def test_extrema_within_seed_extrema(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            seed = rng.random((3, 4, 6))
            out = tops.upsample_smooth(seed, factor=7)
            assert out.min() >= seed.min() - 1e-12
            assert out.max() <= seed.max() + 1e-12

    def test_non_multiple_output_size(self):
        rng = np.random.default_rng(13)
        seed = rng.random((2, 10, 10))
        out = tops.upsample_smooth(seed, factor=7, out_hw=(64, 64))
        assert out.shape == (2, 64, 64)
        assert out.min() >= seed.min() - 1e-12 and out.max() <= seed.max() + 1e-12

    def test_adjoint_is_true_adjoint(self):
        rng = np.random.default_rng(14)
        seed = rng.random((2, 4, 4))
        out = tops.upsample_smooth(seed, factor=7, out_hw=(26, 26))
        g = rng.random(out.shape)
        lhs = float((out * g).sum())
        back = tops.upsample_smooth_adjoint(g, seed.shape[1:], factor=7)
        rhs = float((seed * back).sum())
        assert abs(lhs - rhs) < 1e-10

    def test_bad_factor(self):
        with pytest.raises(ParameterError):
            tops.upsample_smooth(np.zeros((1, 2, 2)), factor=0)


class TestValidators:
    def test_video_checks(self):
        with pytest.raises(ContractError):
            tops.as_video(np.zeros((2, 4, 4)))
        with pytest.raises(ContractError):
            tops.as_video(np.zeros((2, 4, 4, 2)))
        bad = np.zeros((2, 4, 4, 1))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ContractError):
            tops.as_video(bad)

    def test_mask_checks(self):
        with pytest.raises(ContractError):
            tops.as_mask(np.full((2, 4, 4), 1.5))
        m = tops.as_mask(np.full((2, 4, 4), 0.5))
        assert m.dtype == np.float64
