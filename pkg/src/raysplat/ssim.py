"""Windowed SSIM for unit-range images, with the gradient wrt the first image.

Local statistics use an 11x11 Gaussian window (sigma 1.5). Near the image
border the window mass is renormalized over the in-bounds support, so
constant images score exactly according to the closed-form SSIM of two
constants at every pixel.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5


def gaussian_window(size: int = _WINDOW_SIZE, sigma: float = _WINDOW_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _corr(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return ndimage.correlate(img, kernel, mode="constant", cval=0.0)


def ssim(img_a: np.ndarray, img_b: np.ndarray, with_grad: bool = False):
    """Mean SSIM between two images, optionally with d(mssim)/d(img_a).

    Accepts (H, W) or (H, W, C) arrays in [0, 1]. Returns the scalar, or a
    ``(scalar, grad)`` pair when ``with_grad`` is set. SSIM is symmetric in
    its arguments; the gradient refers to the first.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
        squeeze = True
    else:
        squeeze = False

    k = gaussian_window()
    mass = _corr(np.ones(a.shape[:2]), k)
    n_total = a.size

    total = 0.0
    grad = np.zeros_like(a) if with_grad else None
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        m1 = _corr(x, k) / mass
        m2 = _corr(y, k) / mass
        r1 = _corr(x * x, k) / mass
        r2 = _corr(y * y, k) / mass
        r12 = _corr(x * y, k) / mass
        vx = r1 - m1 * m1
        vy = r2 - m2 * m2
        vxy = r12 - m1 * m2

        a1 = 2.0 * m1 * m2 + SSIM_C1
        a2 = 2.0 * vxy + SSIM_C2
        b1 = m1 * m1 + m2 * m2 + SSIM_C1
        b2 = vx + vy + SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        total += s.sum()

        if with_grad:
            dv = -s / b2
            dxy = 2.0 * a1 / (b1 * b2)
            dm = (2.0 / b1) * (m2 * a2 / b2 - m1 * s)
            gm = dm - 2.0 * m1 * dv - m2 * dxy
            grad[:, :, c] = (
                _corr(gm / mass, k) + 2.0 * x * _corr(dv / mass, k) + y * _corr(dxy / mass, k)
            ) / n_total

    value = total / n_total
    if not with_grad:
        return value
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad
