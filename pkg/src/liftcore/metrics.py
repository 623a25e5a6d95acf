"""PSNR and SSIM for (H, W, C) images in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from liftcore._torch import from_array

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    a = from_array(np.asarray(a) if not torch.is_tensor(a) else a, dtype=torch.float64)
    b = from_array(np.asarray(b) if not torch.is_tensor(b) else b, dtype=torch.float64)
    mse = float(torch.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Separable Gaussian filter with zero padding over (1, C, H, W)."""
    ch, k = x.shape[1], len(g)
    pad = k // 2
    x = F.conv2d(x, g.view(1, 1, 1, k).expand(ch, 1, 1, k), padding=(0, pad), groups=ch)
    return F.conv2d(x, g.view(1, 1, k, 1).expand(ch, 1, k, 1), padding=(pad, 0), groups=ch)


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-pixel SSIM with a Gaussian window; inputs are (H, W, C) tensors."""
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    ch = x.shape[0]
    stats = _blur(torch.cat([x, y, x * x, y * y, x * y]).unsqueeze(0), _window(window, sigma, x.dtype))[0]
    mu_x, mu_y = stats[:ch], stats[ch : 2 * ch]
    sxx = stats[2 * ch : 3 * ch] - mu_x * mu_x
    syy = stats[3 * ch : 4 * ch] - mu_y * mu_y
    sxy = stats[4 * ch :] - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return (num / den).permute(1, 2, 0)


def ssim(a, b) -> torch.Tensor | float:
    if torch.is_tensor(a) or torch.is_tensor(b):
        a = torch.as_tensor(a)
        return ssim_map(a, torch.as_tensor(b, dtype=a.dtype)).mean()
    a = from_array(np.asarray(a), dtype=torch.float64)
    b = from_array(np.asarray(b), dtype=torch.float64)
    return float(ssim_map(a, b).mean())
