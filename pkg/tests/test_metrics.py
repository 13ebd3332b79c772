import math

import numpy as np
import pytest

from gaflow import metrics
from gaflow.errors import DimensionError


def test_ssim_of_identical_images():
    a = np.random.default_rng(0).random((3, 16, 16))
    assert metrics.ssim(a, a) == pytest.approx(1.0)


def test_ssim_drops_with_noise():
    rng = np.random.default_rng(0)
    a = rng.random((3, 32, 32))
    b = np.clip(a + rng.normal(0, 0.2, size=a.shape), 0, 1)
    assert metrics.ssim(a, b) < 0.9


def test_ssim_of_inverted_image_is_negative():
    a = np.random.default_rng(1).random((1, 16, 16))
    value = metrics.ssim(a, 1.0 - a)
    assert -1.0 <= value < 0.0


def test_ssim_small_images_use_smaller_window():
    a = np.random.default_rng(1).random((1, 6, 8))
    assert metrics.ssim_map(a, a).shape == (1, 2, 4)


def test_gaussian_window():
    g = metrics.gaussian_window()
    assert len(g) == 11
    assert g.sum() == pytest.approx(1.0)
    assert g.argmax() == 5


def test_psnr():
    a = np.zeros((3, 4, 4))
    assert metrics.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert metrics.psnr(a, a) == math.inf
    with pytest.raises(DimensionError):
        metrics.psnr(a, np.zeros((3, 4, 5)))


def test_pixel_and_majority_accuracy():
    target = np.zeros((3, 2, 2))
    target[0] = 1
    target[:, 1, 1] = [0, 0, 1]
    pred = np.zeros((3, 2, 2))
    pred[1] = 1
    pred[:, 0, 0] = [1, 0, 0]
    assert metrics.pixel_accuracy(pred, target) == pytest.approx(0.25)
    assert metrics.majority_accuracy(target) == pytest.approx(0.75)
