"""Dense numeric kernels shared by every other module.

Conventions: a video is a (T, H, W, C) float64 array with C in {1, 3}; a
mask sequence is a (T, H, W) float64 array with values in [0, 1]. All
operations are pure functions over 64-bit reals and never return NaN/Inf
for finite inputs.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ParameterError

VIDEO_CHANNELS = (1, 3)


def as_video(x) -> np.ndarray:
    """Validate and return ``x`` as a (T, H, W, C) float64 video tensor."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ContractError(f"video must be 4-d (T,H,W,C), got shape {x.shape}")
    if x.shape[3] not in VIDEO_CHANNELS:
        raise ContractError(f"video channels must be in {VIDEO_CHANNELS}, got {x.shape[3]}")
    if min(x.shape[:3]) < 1:
        raise ContractError(f"video dims must be >= 1, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("video contains non-finite values")
    return x


def as_mask(m) -> np.ndarray:
    """Validate and return ``m`` as a (T, H, W) float64 mask sequence."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 3:
        raise ContractError(f"mask must be 3-d (T,H,W), got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError("mask contains non-finite values")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ContractError("mask values must lie in [0, 1]")
    return m


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two same-shape arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian with half-width ceil(2*sigma)."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    hw = int(math.ceil(2.0 * sigma))
    d = np.arange(-hw, hw + 1, dtype=np.float64)
    k = np.exp(-0.5 * (d / sigma) ** 2)
    return k / k.sum()


def _correlate_reflect(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """1-d correlation along ``axis`` with reflect-padded borders."""
    hw = (kernel.size - 1) // 2
    if hw == 0:
        return x * kernel[0]
    x = np.moveaxis(x, axis, -1)
    pad = [(0, 0)] * (x.ndim - 1) + [(hw, hw)]
    xp = np.pad(x, pad, mode="reflect")
    out = sliding_window_view(xp, kernel.size, axis=-1) @ kernel
    return np.moveaxis(out, -1, axis)


def gaussian_blur2d(x, sigma: float) -> np.ndarray:
    """Per-frame, per-channel separable Gaussian blur.

    Accepts (T, H, W) masks or (T, H, W, C) videos; the H/W axes are
    blurred with a kernel of half-width ceil(2*sigma) and reflect padding,
    so constant frames are preserved exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise ContractError(f"expected (T,H,W) or (T,H,W,C), got shape {x.shape}")
    k = gaussian_kernel1d(sigma)
    out = _correlate_reflect(x, k, axis=1)
    return _correlate_reflect(out, k, axis=2)


def conv3d_output_shape(shape, kernel_shape, stride_t: int, stride_s: int, padding: int):
    dims = []
    strides = (stride_t, stride_s, stride_s)
    for d, kd, s in zip(shape, kernel_shape, strides):
        n = (d + 2 * padding - kd) // s + 1
        dims.append(n)
    return tuple(dims)


def conv3d(m, kernel, stride_t: int = 1, stride_s: int = 1, padding: int = 0) -> np.ndarray:
    """Strided valid-region 3-d cross-correlation of a mask with a kernel.

    Output dims are floor((dim + 2*padding - k_dim)/stride) + 1 per axis.
    """
    m = np.asarray(m, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if m.ndim != 3 or kernel.ndim != 3:
        raise ContractError(f"conv3d expects 3-d mask and kernel, got {m.shape}, {kernel.shape}")
    if stride_t < 1 or stride_s < 1 or padding < 0:
        raise ParameterError("strides must be >= 1 and padding >= 0")
    out_shape = conv3d_output_shape(m.shape, kernel.shape, stride_t, stride_s, padding)
    if min(out_shape) < 1:
        raise ParameterError(
            f"kernel {kernel.shape} larger than padded input {m.shape} (padding {padding})"
        )
    if padding:
        m = np.pad(m, padding, mode="constant")
    win = sliding_window_view(m, kernel.shape)
    win = win[::stride_t, ::stride_s, ::stride_s]
    return np.einsum("tijabc,abc->tij", win, kernel, optimize=True)


def conv3d_adjoint(grad_out, kernel, in_shape, stride_t: int = 1, stride_s: int = 1,
                   padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`conv3d` with respect to its mask input."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    kt, kh, kw = kernel.shape
    nt, nh, nw = grad_out.shape
    padded = np.zeros([d + 2 * padding for d in in_shape], dtype=np.float64)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                w = kernel[a, b, c]
                if w == 0.0:
                    continue
                padded[a:a + stride_t * nt:stride_t,
                       b:b + stride_s * nh:stride_s,
                       c:c + stride_s * nw:stride_s] += w * grad_out
    if padding:
        padded = padded[padding:-padding, padding:-padding, padding:-padding]
    return padded


def descending_order(m) -> np.ndarray:
    """Stable argsort of the flattened array, largest first."""
    flat = np.asarray(m, dtype=np.float64).ravel()
    return np.argsort(-flat, kind="stable")


def vecsort(m) -> np.ndarray:
    """All elements flattened and sorted in descending order (stable)."""
    flat = np.asarray(m, dtype=np.float64).ravel()
    return flat[descending_order(flat)]


@lru_cache(maxsize=128)
def _upsample_matrix(n_out: int, n_seed: int, factor: int, sigma: float) -> np.ndarray:
    """Row-stochastic (n_out, n_seed) operator mapping seed cells to pixels.

    Row i holds Gaussian weights w(i - c_p) over seed-cell centers
    c_p = p*factor + (factor-1)/2, normalized to sum to 1, so outputs are
    convex combinations of seed values. Rows whose weights all underflow
    (sigma far below factor) fall back to the nearest center.
    """
    centers = np.arange(n_seed) * factor + (factor - 1) / 2.0
    dist = np.abs(np.arange(n_out)[:, None] - centers[None, :])
    w = np.exp(-0.5 * (dist / sigma) ** 2)
    empty = w.sum(axis=1) == 0.0
    if empty.any():
        nearest = np.argmin(dist[empty], axis=1)
        w[np.nonzero(empty)[0], nearest] = 1.0
    u = w / w.sum(axis=1, keepdims=True)
    u.setflags(write=False)
    return u


def upsample_operators(seed_hw, factor: int, smooth_sigma: float | None = None,
                       out_hw=None):
    """The per-axis operators (U_H, U_W) used by :func:`upsample_smooth`."""
    if factor < 1:
        raise ParameterError(f"factor must be >= 1, got {factor}")
    h_seed, w_seed = seed_hw
    sigma = float(factor) if smooth_sigma is None else float(smooth_sigma)
    if sigma <= 0:
        raise ParameterError(f"smooth_sigma must be > 0, got {sigma}")
    h_out, w_out = out_hw if out_hw is not None else (factor * h_seed, factor * w_seed)
    return (_upsample_matrix(h_out, h_seed, factor, sigma),
            _upsample_matrix(w_out, w_seed, factor, sigma))


def upsample_smooth(seed, factor: int, smooth_sigma: float | None = None,
                    out_hw=None) -> np.ndarray:
    """Smoothly upsample each frame of a small (T, h, w) seed mask.

    Each output pixel is a normalized Gaussian-weighted (transposed
    convolution) blend of seed values, so the output range stays within
    [min(seed), max(seed)]; temporal length is preserved. ``smooth_sigma``
    defaults to ``factor``; ``out_hw`` defaults to factor * seed dims.
    """
    seed = np.asarray(seed, dtype=np.float64)
    if seed.ndim != 3:
        raise ContractError(f"seed must be 3-d (T,h,w), got shape {seed.shape}")
    u_h, u_w = upsample_operators(seed.shape[1:], factor, smooth_sigma, out_hw)
    return np.einsum("ip,tpq,jq->tij", u_h, seed, u_w, optimize=True)


def upsample_smooth_adjoint(grad, seed_hw, factor: int,
                            smooth_sigma: float | None = None) -> np.ndarray:
    """Adjoint of :func:`upsample_smooth` with respect to the seed."""
    grad = np.asarray(grad, dtype=np.float64)
    u_h, u_w = upsample_operators(seed_hw, factor, smooth_sigma, grad.shape[1:])
    return np.einsum("ip,tij,jq->tpq", u_h, grad, u_w, optimize=True)
