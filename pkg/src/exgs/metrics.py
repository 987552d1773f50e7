"""Image quality metrics: PSNR (capped) and differentiable SSIM.

SSIM follows the standard Wang et al. setup — 11x11 Gaussian window with
sigma 1.5, C1 = (0.01 L)^2, C2 = (0.03 L)^2, weighted (population) moments —
computed over the valid interior so values match scikit-image's
``gaussian_weights=True, use_sample_covariance=False`` configuration.  Both
metrics run on torch tensors and keep the autograd graph, so 1 - SSIM can
serve directly as a loss term.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _as_image(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    if t.dim() == 2:
        t = t[:, :, None]
    if t.dim() != 3:
        raise ValueError(f"expected (H, W[, C]) image, got shape {tuple(t.shape)}")
    return t.double() if not t.is_floating_point() else t


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; capped for MSE = 0."""
    a = _as_image(a)
    b = _as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse <= 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def _gaussian_kernel(dtype: torch.dtype) -> torch.Tensor:
    half = SSIM_WINDOW // 2
    coords = torch.arange(-half, half + 1, dtype=dtype)
    g = torch.exp(-(coords**2) / (2.0 * SSIM_SIGMA**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def ssim(a, b) -> torch.Tensor:
    """Mean SSIM over channels and valid window positions (differentiable)."""
    a = _as_image(a)
    b = _as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    b = b.to(a.dtype)
    kernel = _gaussian_kernel(a.dtype)
    x = a.permute(2, 0, 1)[:, None]  # (C, 1, H, W)
    y = b.permute(2, 0, 1)[:, None]

    def filt(t):
        return F.conv2d(t, kernel)

    mu_x = filt(x)
    mu_y = filt(y)
    xx = filt(x * x) - mu_x * mu_x
    yy = filt(y * y) - mu_y * mu_y
    xy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _C1) * (2 * xy + _C2)
    den = (mu_x * mu_x + mu_y * mu_y + _C1) * (xx + yy + _C2)
    return (num / den).mean()
