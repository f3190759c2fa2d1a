"""
Tests for PSNR, SSIM, data consistency and the TV reconstruction baseline
"""

import numpy as np
import pytest

from app.models.geometry import Geometry, Sinogram
from app.services import metrics, phantoms, tomography, tv
from app.utils.exceptions import GeometryMismatchException, InvalidInputException, ShapeMismatchException


def test_psnr_known_value():
    ref = np.zeros((16, 16))
    assert metrics.psnr(ref + 0.01, ref) == pytest.approx(40.0, abs=1e-9)


def test_psnr_identical_images_is_infinite():
    x = np.random.default_rng(0).random((8, 8))
    assert metrics.psnr(x, x) == float("inf")


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeMismatchException):
        metrics.psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identity_and_ordering():
    ref = phantoms.shepp_logan(32).astype(np.float64)
    assert metrics.ssim(ref, ref) == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(1)
    mild = ref + 0.02 * rng.standard_normal(ref.shape)
    strong = ref + 0.2 * rng.standard_normal(ref.shape)
    assert 1.0 > metrics.ssim(mild, ref) > metrics.ssim(strong, ref)


def test_ssim_is_symmetric():
    rng = np.random.default_rng(2)
    a = phantoms.shepp_logan(24).astype(np.float64)
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0.0, 1.0)
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)


@pytest.mark.parametrize("a,b", [(0.5, 0.5), (0.2, 0.6), (0.9, 0.1)])
def test_ssim_of_constant_images_is_luminance_term(a, b):
    c1 = 0.01**2
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    assert metrics.ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expected, abs=1e-9)


def test_ssim_rejects_tiny_images():
    with pytest.raises(InvalidInputException) as exc:
        metrics.ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    assert exc.value.error_code == "IMAGE_TOO_SMALL"


def test_consistency_error_of_truth_is_zero():
    geom = Geometry(size=16, angle_step=10.0, theta_miss=60.0)
    image = phantoms.disk_phantom(16)
    y = tomography.radon(image, geom)
    assert metrics.consistency_error(image, y, geom) == pytest.approx(0.0, abs=1e-6)
    assert metrics.consistency_error(np.zeros_like(image), y, geom) == pytest.approx(np.linalg.norm(y.values), rel=1e-6)
    with pytest.raises(GeometryMismatchException):
        metrics.consistency_error(image, y, geom.with_theta_miss(90.0))


def test_noise_sweep_decreases():
    ref = phantoms.disk_phantom(16)
    values = metrics.noise_sweep(ref, ref, [0.01, 0.05, 0.1])
    assert values == sorted(values, reverse=True)


def test_tv_divergence_is_adjoint_of_gradient():
    rng = np.random.default_rng(2)
    u = rng.standard_normal((7, 9))
    p = rng.standard_normal((2, 7, 9))
    assert np.sum(tv._grad(u) * p) == pytest.approx(-np.sum(u * tv._div(p)), rel=1e-12)


def test_total_variation_of_constant_is_zero():
    assert tv.total_variation(np.full((8, 8), 0.3)) == 0.0
    step = np.zeros((8, 8))
    step[:, 4:] = 1.0
    assert tv.total_variation(step) == pytest.approx(8.0)


def test_operator_norm_matches_dense_svd():
    geom = Geometry(size=8, angle_step=20.0)
    dense = tomography.operator_for(geom).matrix.toarray()
    expected = np.linalg.norm(dense, 2) ** 2
    assert tv.operator_norm_sq(geom, iters=200) == pytest.approx(expected, rel=1e-3)


def test_tv_objective_never_increases_and_stays_in_box():
    geom = Geometry(size=32, angle_step=3.0, theta_miss=90.0)
    y = tomography.radon(phantoms.disk_phantom(32), geom)
    result = tv.tv_reconstruct(y, geom, lambda_tv=0.5, iters=30)
    assert np.all(np.diff(result.objective) <= 0)
    assert result.image.min() >= 0.0
    assert result.image.max() <= 1.0
    assert result.accepted == len(result.objective) - 1


def test_tv_beats_fbp_on_limited_angle_disk():
    geom = Geometry(size=32, angle_step=3.0, theta_miss=90.0)
    disk = phantoms.disk_phantom(32, radius=0.3, intensity=0.8)
    y = tomography.radon(disk, geom)
    recon = tv.tv_reconstruct(y, geom, lambda_tv=0.5, iters=100).image
    baseline = np.clip(tomography.fbp(y), 0.0, 1.0)
    assert metrics.psnr(recon, disk) > metrics.psnr(baseline, disk)


def test_huge_lambda_flattens_image():
    geom = Geometry(size=16, angle_step=10.0)
    y = tomography.radon(phantoms.shepp_logan(16), geom)
    start = np.clip(tomography.fbp(y), 0.0, 1.0)
    result = tv.tv_reconstruct(y, geom, lambda_tv=1e4, iters=20, inner_iters=50)
    assert tv.total_variation(result.image) < 0.5 * tv.total_variation(start)


def test_tv_rejects_negative_lambda():
    geom = Geometry(size=16, angle_step=10.0)
    with pytest.raises(InvalidInputException):
        tv.tv_reconstruct(Sinogram(geom, np.zeros(geom.sinogram_shape)), geom, lambda_tv=-1.0, iters=1)
