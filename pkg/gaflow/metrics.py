""" Image-quality and segmentation metrics (evaluation only, no gradients). """
from __future__ import annotations

import logging
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_array(x) -> np.ndarray:
    data = getattr(x, "data", x)
    return np.asarray(data, dtype=np.float64)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-r * r / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """ Separable 'valid' filtering of the two trailing axes. """
    k = len(g)
    vertical = sliding_window_view(x, k, axis=-2) @ g
    return sliding_window_view(vertical, k, axis=-1) @ g


def ssim_map(a, b) -> np.ndarray:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {a.shape} and {b.shape} differ.")
    h, w = a.shape[-2:]
    size = min(SSIM_WINDOW, h, w)
    if size % 2 == 0:
        size -= 1
    g = gaussian_window(size)

    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """ Mean SSIM with an 11x11 Gaussian window (sigma 1.5), values in [-1, 1]. """
    return float(ssim_map(a, b).mean())


def psnr(a, b) -> float:
    """ 10 log10(1 / MSE) in dB; +inf when the images are identical. """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ.")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(1 / mse)


def pixel_accuracy(pred_probs, target_onehot) -> float:
    p, t = _as_array(pred_probs), _as_array(target_onehot)
    axis = p.ndim - 3
    return float(np.mean(p.argmax(axis=axis) == t.argmax(axis=axis)))


def majority_accuracy(target_onehot) -> float:
    """ Accuracy of always predicting the most frequent class. """
    t = _as_array(target_onehot)
    axis = t.ndim - 3
    labels = t.argmax(axis=axis)
    counts = np.bincount(labels.ravel(), minlength=t.shape[axis])
    return float(counts.max() / labels.size)


logger = logging.getLogger(__name__)
