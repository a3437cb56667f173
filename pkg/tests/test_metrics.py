import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from dynsplat.errors import InvalidInputError
from dynsplat.metrics import MetricReport, dssim, dssim_with_grad, psnr, ssim


def test_psnr_identical_is_inf():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert psnr(img, img) == math.inf


def test_psnr_uniform_offsets():
    a = np.full((20, 20, 3), 0.4)
    assert np.isclose(psnr(a, a + 0.1), 20.0)
    assert np.isclose(psnr(a, a + 0.5), 10.0 * math.log10(1.0 / 0.25), atol=1e-9)
    assert np.isclose(psnr(a, a + 0.5), 6.0206, atol=1e-3)


def test_psnr_shape_mismatch():
    with pytest.raises(InvalidInputError):
        psnr(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


def test_ssim_identity():
    img = np.random.default_rng(1).uniform(size=(24, 24, 3))
    assert np.isclose(ssim(img, img), 1.0, atol=1e-12)


def test_ssim_symmetric():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(20, 24, 3))
    b = rng.uniform(size=(20, 24, 3))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_inverted_checkerboard_low():
    ys, xs = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    board = (((ys // 4) + (xs // 4)) % 2).astype(np.float64)
    a = np.stack([board] * 3, axis=-1)
    b = 1.0 - a
    assert ssim(a, b) < 0.1


def test_ssim_rejects_small_images():
    with pytest.raises(InvalidInputError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_dssim_relation():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(16, 16, 3))
    b = rng.uniform(size=(16, 16, 3))
    assert np.isclose(dssim(a, b), (1.0 - ssim(a, b)) / 2.0)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_reference_implementation(seed):
    rng = np.random.default_rng(seed + 40)
    shape = (int(rng.integers(16, 48)), int(rng.integers(16, 48)), 3)
    a = rng.uniform(size=shape)
    # correlated pair: smooth base plus noise, more realistic than iid
    b = np.clip(a + rng.normal(scale=0.08, size=shape), 0.0, 1.0)
    ours = ssim(a, b)
    reference = structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        data_range=1.0, channel_axis=2)
    assert abs(ours - reference) < 1e-4


def test_dssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.1, 0.9, size=(16, 16, 3))
    y = rng.uniform(0.1, 0.9, size=(16, 16, 3))
    _, grad = dssim_with_grad(x, y)
    h = 1e-6
    for index in [(0, 0, 0), (8, 8, 1), (5, 12, 2), (15, 15, 0), (3, 7, 1)]:
        orig = x[index]
        x[index] = orig + h
        up, _ = dssim_with_grad(x, y)
        x[index] = orig - h
        dn, _ = dssim_with_grad(x, y)
        x[index] = orig
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad[index]) <= 1e-5 * max(1.0, abs(fd))


def test_metric_report_csv():
    report = MetricReport()
    report.add(0, 1, 30.0, 0.95)
    report.add(1, 1, 32.0, 0.97)
    csv = report.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "frame,camera,psnr_db,ssim"
    assert lines[1].startswith("0,1,30.0")
    assert lines[-1].startswith("mean,,31.0")
    assert np.isclose(report.mean_psnr, 31.0)
