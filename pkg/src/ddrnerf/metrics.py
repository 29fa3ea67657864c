"""Image quality metrics."""

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeMismatchError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03

# ITU-R BT.601 luma
_LUMA = np.array([0.299, 0.587, 0.114])


def _pair(img, ref):
    img = np.asarray(img, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if img.shape != ref.shape:
        raise ShapeMismatchError(f"image shape {img.shape} != reference shape {ref.shape}")
    return img, ref


def psnr(img, ref):
    """10·log10(1/MSE) for images in [0, 1]; identical images give PSNR_CAP."""
    img, ref = _pair(img, ref)
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def to_gray(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ _LUMA
    if img.ndim == 2:
        return img
    raise ShapeMismatchError(f"expected H×W or H×W×3 image, got {img.shape}")


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x, g):
    # valid-region separable filtering
    y = correlate1d(x, g, axis=0, mode="constant")
    y = correlate1d(y, g, axis=1, mode="constant")
    r = len(g) // 2
    return y[r:-r or None, r:-r or None]


def ssim_map(img, ref):
    a, b = _pair(to_gray(img), to_gray(ref))
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeMismatchError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_window()
    c1, c2 = K1**2, K2**2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    s_aa = _filter(a * a, g) - mu_a**2
    s_bb = _filter(b * b, g) - mu_b**2
    s_ab = _filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(img, ref):
    """Mean Gaussian-windowed SSIM on the luma channel, dynamic range 1."""
    return float(np.mean(ssim_map(img, ref)))
