"""
Parallel-beam Radon transform, its exact adjoint (back-projection), ramp
filtering and filtered back-projection.

Ray convention: pixel (i, j) sits at x = j - c, y = c - i with c = (N - 1) / 2.
Detector bin d sits at r = d - (D - 1) / 2. The ray for angle theta and bin r is
the line x cos(theta) + y sin(theta) = r, sampled at unit (pixel) pitch along
(-sin(theta), cos(theta)) with bilinear interpolation. The operator is stored
as a sparse matrix so back-projection is its exact transpose.

The reconstruction domain is the inscribed circle |(x, y)| <= N / 2. Pixels
outside it have no column in the matrix: radon ignores them and back-projection
leaves them at zero.
"""

from functools import lru_cache
from typing import Literal, Tuple

import numpy as np
import structlog
from scipy import sparse

from app.models.geometry import Geometry, Sinogram
from app.services.numerics import padded_length
from app.utils.exceptions import InvalidInputException

logger = structlog.get_logger(__name__)

Window = Literal["none", "hann"]


def _ray_samples(size: int) -> np.ndarray:
    count = int(np.ceil(np.sqrt(2.0) * size))
    # Same parity as the image so samples land on pixel rows at theta = 0
    if (count - size) % 2:
        count += 1
    return np.arange(count, dtype=np.float64) - (count - 1) / 2.0


def reconstruction_circle(size: int) -> np.ndarray:
    """Pixels whose centers lie inside the inscribed circle of radius size / 2"""
    center = (size - 1) / 2.0
    idx = np.arange(size, dtype=np.float64) - center
    return idx[:, None] ** 2 + idx[None, :] ** 2 <= (size / 2.0) ** 2


def _system_matrix(geometry: Geometry) -> sparse.csr_matrix:
    n = geometry.size
    center = (n - 1) / 2.0
    r = np.arange(geometry.num_detectors, dtype=np.float64) - (geometry.num_detectors - 1) / 2.0
    s = _ray_samples(n)
    cos = np.cos(geometry.angles)[:, None, None]
    sin = np.sin(geometry.angles)[:, None, None]

    x = r[None, :, None] * cos - s[None, None, :] * sin
    y = r[None, :, None] * sin + s[None, None, :] * cos
    col = x + center
    row = center - y

    r0 = np.floor(row)
    c0 = np.floor(col)
    fr = row - r0
    fc = col - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)

    corner_rows = np.stack([r0, r0, r0 + 1, r0 + 1], axis=-1)
    corner_cols = np.stack([c0, c0 + 1, c0, c0 + 1], axis=-1)
    weights = np.stack(
        [(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc],
        axis=-1,
    )
    ray = np.broadcast_to(
        np.arange(geometry.num_angles * geometry.num_detectors).reshape(
            geometry.num_angles, geometry.num_detectors, 1, 1
        ),
        weights.shape,
    )

    keep = (
        (weights > 0)
        & (corner_rows >= 0)
        & (corner_rows < n)
        & (corner_cols >= 0)
        & (corner_cols < n)
    )
    inside = reconstruction_circle(n)
    keep[keep] = inside[corner_rows[keep], corner_cols[keep]]
    matrix = sparse.coo_matrix(
        (weights[keep], (ray[keep], corner_rows[keep] * n + corner_cols[keep])),
        shape=(geometry.num_angles * geometry.num_detectors, n * n),
    ).tocsr()
    logger.debug(
        "radon_matrix_built",
        angles=geometry.num_angles,
        detectors=geometry.num_detectors,
        size=n,
        nnz=int(matrix.nnz),
    )
    return matrix


class RadonOperator:
    """Sparse Radon matrix for one geometry, applied to single images or batches"""

    def __init__(self, geometry: Geometry):
        self.geometry = geometry
        self.matrix = _system_matrix(geometry)
        self.matrix_t = self.matrix.T.tocsr()

    def project(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        self.geometry.require_image(images)
        dtype = np.result_type(images.dtype, np.float32)
        lead = images.shape[:-2]
        flat = images.reshape(-1, self.geometry.size * self.geometry.size)
        out = (self.matrix @ flat.T).T
        return out.reshape(lead + self.geometry.sinogram_shape).astype(dtype, copy=False)

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values)
        dtype = np.result_type(values.dtype, np.float32)
        lead = values.shape[:-2]
        flat = values.reshape(-1, self.geometry.num_angles * self.geometry.num_detectors)
        out = (self.matrix_t @ flat.T).T
        return out.reshape(lead + self.geometry.image_shape).astype(dtype, copy=False)

    @property
    def fbp_scale(self) -> float:
        return np.pi / self.geometry.num_angles


@lru_cache(maxsize=32)
def operator_for(geometry: Geometry) -> RadonOperator:
    return RadonOperator(geometry)


@lru_cache(maxsize=32)
def ramp_response(num_detectors: int, window: Window = "none") -> Tuple[np.ndarray, int]:
    """
    Ram-Lak frequency response on the rfft grid of the padded length.

    Built as the transform of the closed-form spatial kernel (1/4 at 0,
    -1/(pi n)^2 at odd n, 0 at even n) so that filtering an impulse reproduces
    that kernel exactly.

    Returns:
        (response over n_fft // 2 + 1 bins, n_fft)
    """
    n_fft = padded_length(num_detectors)
    offsets = np.fft.fftfreq(n_fft, d=1.0 / n_fft)
    kernel = np.zeros(n_fft)
    kernel[offsets == 0] = 0.25
    odd = (offsets.astype(np.int64) % 2) != 0
    kernel[odd] = -1.0 / (np.pi * offsets[odd]) ** 2
    response = np.real(np.fft.rfft(kernel))
    if window == "hann":
        response = response * 0.5 * (1.0 + np.cos(2.0 * np.pi * np.fft.rfftfreq(n_fft)))
    elif window != "none":
        raise InvalidInputException(
            f"Unknown ramp window: {window}", error_code="UNKNOWN_WINDOW", details={"window": window}
        )
    response.setflags(write=False)
    return response, n_fft


def apply_ramp(values: np.ndarray, response: np.ndarray, n_fft: int) -> np.ndarray:
    values = np.asarray(values)
    width = values.shape[-1]
    spectrum = np.fft.rfft(values.astype(np.float64), n=n_fft, axis=-1)
    filtered = np.fft.irfft(spectrum * response, n=n_fft, axis=-1)[..., :width]
    return filtered.astype(np.result_type(values.dtype, np.float32), copy=False)


def radon(image: np.ndarray, geom: Geometry) -> Sinogram:
    return Sinogram(geom, operator_for(geom).project(image))


def backproject(sino: Sinogram) -> np.ndarray:
    return operator_for(sino.geometry).adjoint(sino.values)


def ramp_filter(sino: Sinogram, window: Window = "none") -> Sinogram:
    response, n_fft = ramp_response(sino.geometry.num_detectors, window)
    return Sinogram(sino.geometry, apply_ramp(sino.values, response, n_fft))


def fbp(sino: Sinogram, window: Window = "none") -> np.ndarray:
    """Ramp-filter every row, back-project and scale by pi / (number of kept angles)"""
    operator = operator_for(sino.geometry)
    return operator.adjoint(ramp_filter(sino, window).values) * operator.fbp_scale
