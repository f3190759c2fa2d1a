"""
Image quality metrics and data consistency
"""

from typing import List, Sequence

import numpy as np
from skimage.metrics import structural_similarity

from app.models.geometry import Geometry, Sinogram
from app.services.tomography import radon
from app.utils.exceptions import InvalidInputException, ShapeMismatchException

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _require_same_shape(x: np.ndarray, ref: np.ndarray):
    if np.shape(x) != np.shape(ref):
        raise ShapeMismatchException(
            "Image and reference differ in shape",
            error_code="SHAPE_MISMATCH",
            details={"image": list(np.shape(x)), "reference": list(np.shape(ref))},
        )


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical images give +inf"""
    _require_same_shape(x, ref)
    mse = float(np.mean(np.square(np.asarray(x, dtype=np.float64) - np.asarray(ref, dtype=np.float64))))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def ssim(x: np.ndarray, ref: np.ndarray) -> float:
    """
    Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2 and
    C2 = 0.03^2 at data range 1.
    """
    _require_same_shape(x, ref)
    if np.ndim(x) != 2 or min(np.shape(x)) < SSIM_WINDOW:
        raise InvalidInputException(
            f"SSIM needs a 2-D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}",
            error_code="IMAGE_TOO_SMALL",
            details={"shape": list(np.shape(x))},
        )
    return float(
        structural_similarity(
            np.asarray(x, dtype=np.float64),
            np.asarray(ref, dtype=np.float64),
            data_range=1.0,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


def consistency_error(x: np.ndarray, y: Sinogram, geom: Geometry) -> float:
    """||radon(x) - y||_2 over the kept angles"""
    geom.require_same(y.geometry, "measurement")
    residual = radon(np.asarray(x, dtype=np.float64), geom).values - np.asarray(y.values, dtype=np.float64)
    return float(np.linalg.norm(residual))


def noise_sweep(x: np.ndarray, ref: np.ndarray, sigmas: Sequence[float], seed: int = 0) -> List[float]:
    """PSNR of x + sigma * n against ref for one fixed noise field n"""
    noise = np.random.default_rng(seed).standard_normal(np.shape(x))
    base = np.asarray(x, dtype=np.float64)
    return [psnr(base + sigma * noise, ref) for sigma in sigmas]
