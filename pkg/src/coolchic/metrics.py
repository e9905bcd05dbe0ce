"""MSE / PSNR, MS-SSIM and the training distortion.

Images are [3,H,W] arrays (or tensors) with values in [0,1]. ``ms_ssim`` and
``distortion`` accept tensors and stay differentiable.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, as_tensor, avg_pool2, clamp, gaussian_filter_valid

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DEFAULT_ALPHA = 0.01
# contrast/structure terms are clipped here before the fractional power
CS_FLOOR = 1e-8


def gaussian_taps(size=WINDOW_SIZE, sigma=WINDOW_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _check_pair(x, xhat):
    if x.shape != xhat.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {xhat.shape}")


def mse(x, xhat):
    """Mean squared error over all values."""
    x, xhat = np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64)
    _check_pair(x, xhat)
    return float(np.mean((x - xhat) ** 2))


def psnr(x, xhat, peak=1.0):
    m = mse(x, xhat)
    if m == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / m)


def psnr_from_mse(m, peak=1.0):
    return math.inf if m == 0 else 10.0 * math.log10(peak**2 / m)


def num_scales(height, width, max_scales=len(MS_SSIM_WEIGHTS), window=WINDOW_SIZE):
    """How many dyadic scales keep the window inside the image."""
    n = 0
    h, w = height, width
    while n < max_scales and h >= window and w >= window:
        n += 1
        h, w = h // 2, w // 2
    return n


def scale_weights(n):
    w = np.array(MS_SSIM_WEIGHTS[:n])
    return w / w.sum()


def _filtered_stats(x, taps):
    """Gaussian mean and second moment of a constant (gradient-free) image."""
    return gaussian_filter_valid(x, taps), gaussian_filter_valid(x * x, taps)


def _ssim_terms(x, y, taps, c1, c2, x_stats=None):
    mu_x, f_xx = x_stats if x_stats is not None else _filtered_stats(x, taps)
    mu_y = gaussian_filter_valid(y, taps)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    s_xx = f_xx - mu_xx
    s_yy = gaussian_filter_valid(y * y, taps) - mu_yy
    s_xy = gaussian_filter_valid(x * y, taps) - mu_xy
    cs_map = (2.0 * s_xy + c2) / (s_xx + s_yy + c2)
    lum_map = (2.0 * mu_xy + c1) / (mu_xx + mu_yy + c1)
    return lum_map, cs_map


class MsSsimReference:
    """Per-scale statistics of a fixed reference image, reused across calls.

    Only valid when the reference never requires a gradient (the training target).
    """

    def __init__(self, x, max_scales=len(MS_SSIM_WEIGHTS)):
        x = as_tensor(x)
        h, w = x.shape[-2:]
        self.shape = x.shape
        self.scales = num_scales(h, w, max_scales)
        if self.scales == 0:
            raise ValueError(f"image {h}x{w} is smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} window")
        taps = gaussian_taps()
        self.images, self.stats = [], []
        for i in range(self.scales):
            if i > 0:
                x = avg_pool2(x.detach())
            self.images.append(x.detach())
            self.stats.append(tuple(t.detach() for t in _filtered_stats(x.detach(), taps)))


def ms_ssim_tensor(x, y, max_scales=len(MS_SSIM_WEIGHTS), data_range=1.0, reference=None):
    """Differentiable MS-SSIM of two [C,H,W] tensors, averaged over channels.

    ``reference`` is an optional :class:`MsSsimReference` built from ``x``.
    """
    x, y = as_tensor(x), as_tensor(y)
    _check_pair(x, y)
    h, w = x.shape[-2:]
    n = num_scales(h, w, max_scales)
    if n == 0:
        raise ValueError(f"image {h}x{w} is smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} window")
    if reference is not None and (reference.scales != n or reference.shape != x.shape):
        raise ValueError("reference statistics do not match the image")
    weights = scale_weights(n)
    taps = gaussian_taps()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    result = None
    for i in range(n):
        if i > 0:
            y = avg_pool2(y)
            x = reference.images[i] if reference is not None else avg_pool2(x)
        stats = reference.stats[i] if reference is not None else None
        lum_map, cs_map = _ssim_terms(x, y, taps, c1, c2, stats)
        if i < n - 1:
            term = cs_map.mean(axis=(1, 2))
        else:
            term = (lum_map * cs_map).mean(axis=(1, 2))
        term = clamp(term, CS_FLOOR, math.inf) ** float(weights[i])
        result = term if result is None else result * term
    return result.mean()


def ms_ssim(x, xhat, max_scales=len(MS_SSIM_WEIGHTS)):
    """MS-SSIM of two [3,H,W] images in [0,1]."""
    return float(ms_ssim_tensor(np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64), max_scales).data)


def distortion_tensor(x, xhat, alpha=DEFAULT_ALPHA, reference=None):
    """``mse + alpha * (1 - ms_ssim)`` with gradients flowing into tensor args."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    x, xhat = as_tensor(x, getattr(xhat, "dtype", None)), as_tensor(xhat)
    _check_pair(x, xhat)
    diff = xhat - x
    d = (diff * diff).mean()
    if alpha == 0:
        return d
    return d + alpha * (1.0 - ms_ssim_tensor(x, xhat, reference=reference))


def distortion(x, xhat, alpha=DEFAULT_ALPHA):
    x, xhat = np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64)
    return float(distortion_tensor(Tensor(x), Tensor(xhat), alpha).data)


# 8-bit conversions ------------------------------------------------------------


def to_unit(img8):
    """[H,W,3] uint8 to [3,H,W] float in [0,1]."""
    a = np.asarray(img8)
    return np.transpose(a, (2, 0, 1)).astype(np.float64) / 255.0


def to_uint8(img01):
    """[3,H,W] float in [0,1] to [H,W,3] uint8."""
    a = np.clip(np.asarray(img01, dtype=np.float64), 0.0, 1.0)
    return np.transpose(np.floor(255.0 * a + 0.5), (1, 2, 0)).astype(np.uint8)
