"""Image quality metrics: PSNR and windowed SSIM (differentiable)."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as Fnn

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """10 * log10(1 / MSE), capped at 100 dB for near-exact matches."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch {img.shape} vs {ref.shape}")
    mse = float(((img - ref) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    xs = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(xs ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def _blur(x: torch.Tensor, g: torch.Tensor, c: int) -> torch.Tensor:
    # separable gaussian: two 1d convs beat one dense 11x11 kernel on cpu
    kv = g.reshape(1, 1, -1, 1).expand(c, 1, -1, 1)
    kh = g.reshape(1, 1, 1, -1).expand(c, 1, 1, -1)
    return Fnn.conv2d(Fnn.conv2d(x, kv, groups=c), kh, groups=c)


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over valid 11x11 Gaussian windows; inputs H x W x C."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    c = a.shape[2]
    xs = torch.arange(SSIM_WINDOW, dtype=a.dtype) - (SSIM_WINDOW - 1) / 2.0
    g = torch.exp(-(xs ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    mu_x = _blur(x, g, c)
    mu_y = _blur(y, g, c)
    xx = _blur(x * x, g, c) - mu_x ** 2
    yy = _blur(y * y, g, c) - mu_y ** 2
    xy = _blur(x * y, g, c) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (xx + yy + SSIM_C2)
    return (num / den).mean()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    with torch.no_grad():
        return float(ssim_torch(torch.as_tensor(a, dtype=torch.float64),
                                torch.as_tensor(b, dtype=torch.float64)))
