"""PSNR and SSIM for images in [0, 1], plus the SSIM gradient used by the D-SSIM loss."""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import convolve1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> NDArray:
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


_KERNEL = gaussian_kernel()


def _blur(x: NDArray) -> NDArray:
    # zero padding with a symmetric kernel: the operator is its own adjoint
    y = convolve1d(x, _KERNEL, axis=0, mode="constant", cval=0.0)
    return convolve1d(y, _KERNEL, axis=1, mode="constant", cval=0.0)


def _check(a: NDArray, b: NDArray) -> tuple[NDArray, NDArray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def psnr(a: NDArray, b: NDArray) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a: NDArray, b: NDArray, return_grad: bool = False):
    """Mean SSIM over pixels and channels with an 11x11 Gaussian window (sigma 1.5).

    With ``return_grad`` also returns dSSIM/da.
    """
    shape = np.shape(a)
    a, b = _check(a, b)
    mu_a, mu_b = _blur(a), _blur(b)
    e_aa, e_bb, e_ab = _blur(a * a), _blur(b * b), _blur(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + C1
    A2 = 2 * cov + C2
    B1 = mu_a * mu_a + mu_b * mu_b + C1
    B2 = var_a + var_b + C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(np.mean(smap))
    if not return_grad:
        return value
    n = smap.size
    g_mu = smap * (2 * mu_b / A1 - 2 * mu_b / A2 - 2 * mu_a / B1 + 2 * mu_a / B2) / n
    g_eaa = -smap / B2 / n
    g_eab = 2 * smap / A2 / n
    grad = _blur(g_mu) + 2 * a * _blur(g_eaa) + b * _blur(g_eab)
    return value, grad.reshape(shape)
