"""PSNR and SSIM restricted to a pixel bounding box, images in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

K1, K2 = 0.01, 0.03
WINDOW = 11
SIGMA = 1.5
DATA_RANGE = 1.0


def _crop(image, bbox):
    image = np.asarray(image, dtype=np.float64)
    if bbox is None:
        return image
    x0, y0, x1, y1 = bbox
    h, w = image.shape[:2]
    if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
        raise ValueError(f"bbox {tuple(bbox)} outside a {w}x{h} image")
    return image[y0:y1 + 1, x0:x1 + 1]


def psnr(image, reference, bbox=None) -> float:
    """``10 log10(1 / MSE)`` over the bbox; ``inf`` when the crops are identical."""
    a, b = _crop(image, bbox), _crop(reference, bbox)
    if a.shape != b.shape:
        raise ValueError("image and reference differ in shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation, keeping only fully covered positions
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(image, reference, bbox=None) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Statistics use population (biased) moments; only window positions that
    fit entirely inside the bbox contribute.
    """
    a, b = _crop(image, bbox), _crop(reference, bbox)
    if a.shape != b.shape:
        raise ValueError("image and reference differ in shape")
    if a.shape[0] < WINDOW or a.shape[1] < WINDOW:
        raise ValueError(f"bbox {a.shape[1]}x{a.shape[0]} is smaller than the {WINDOW}x{WINDOW} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    g = gaussian_window()
    values = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        vx = _filter_valid(x * x, g) - mx * mx
        vy = _filter_valid(y * y, g) - my * my
        cxy = _filter_valid(x * y, g) - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))
