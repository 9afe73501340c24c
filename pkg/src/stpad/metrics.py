"""Pointwise and structural error metrics on numpy arrays.

Frames are arrays whose last two axes are (h, w); any leading axes (batch,
time, channel) are averaged over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stpad.errors import ValidationError

INF = "inf"
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001)


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    return pred, truth


def mse(pred, truth):
    pred, truth = _pair(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth):
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def psnr_from_mse(mse_value, max_value):
    if max_value <= 0:
        raise ValidationError(f"max_value must be > 0, got {max_value}")
    if mse_value == 0:
        return INF
    return 10.0 * math.log10(max_value**2 / mse_value)


def psnr(pred, truth, max_value):
    """Peak signal-to-noise ratio in dB; identical inputs give the string ``"inf"``."""
    return psnr_from_mse(mse(pred, truth), max_value)


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def constants(self, data_range):
        return (self.k1 * data_range) ** 2, (self.k2 * data_range) ** 2


def data_range_of(truth):
    """Value range of ``truth``; 1.0 when the truth is constant."""
    r = float(np.max(truth) - np.min(truth))
    return r if r > 0 else 1.0


def gaussian_window(size, sigma):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img, g):
    """Separable 'valid' Gaussian filtering over the last two axes."""
    k = len(g)
    out = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(out, k, axis=-2) @ g


def _ssim_maps(x, y, data_range, cfg, window=None):
    size = window or cfg.window
    if x.shape[-1] < size or x.shape[-2] < size:
        raise ValidationError(f"frame {x.shape[-2:]} smaller than the {size}x{size} window")
    g = gaussian_window(size, cfg.sigma)
    c1, c2 = cfg.constants(data_range)
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum * cs, cs


def ssim(pred, truth, data_range=None, cfg=SSIMConfig()):
    """Mean windowed SSIM. ``data_range`` defaults to the range of ``truth``."""
    pred, truth = _pair(pred, truth)
    if data_range is None:
        data_range = data_range_of(truth)
    s, _ = _ssim_maps(pred, truth, data_range, cfg)
    return float(np.mean(s))


def _downsample(img):
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 1::2, 0::2]
                   + img[..., 0::2, 1::2] + img[..., 1::2, 1::2])


def ms_ssim(pred, truth, data_range=None, cfg=SSIMConfig(), weights=MS_SSIM_WEIGHTS):
    """Multi-scale SSIM over ``len(weights)`` dyadic scales.

    Weights are renormalized to sum to one. The Gaussian window shrinks to the
    frame size at scales where it no longer fits, and the per-scale factors
    are clipped at zero so the result lies in [0, 1].
    """
    pred, truth = _pair(pred, truth)
    n = len(weights)
    finest = cfg.window * 2 ** (n - 2) if n > 1 else cfg.window
    finest = max(finest, 32 if n == 3 else finest)
    if min(pred.shape[-2:]) < finest:
        raise ValidationError(f"ms_ssim with {n} scales needs frames of at least "
                              f"{finest}x{finest}, got {pred.shape[-2:]}")
    if data_range is None:
        data_range = data_range_of(truth)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    x, y, out = pred, truth, 1.0
    for j in range(n):
        size = min(cfg.window, *x.shape[-2:])
        s, cs = _ssim_maps(x, y, data_range, cfg, window=size)
        val = np.mean(s) if j == n - 1 else np.mean(cs)
        out *= max(float(val), 0.0) ** w[j]
        x, y = _downsample(x), _downsample(y)
    return float(out)
