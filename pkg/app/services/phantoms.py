"""
Synthetic phantoms and the on-disk dataset of (image, limited-angle sinogram,
FBP reconstruction) triples.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import structlog
from scipy.ndimage import gaussian_filter

from app.core.config import settings
from app.models.config import PhantomSpec
from app.models.geometry import Geometry
from app.models.reports import DatasetManifest, ManifestItem
from app.services.tomography import fbp, radon
from app.utils.container import file_sha256, load_tensor, save_tensor
from app.utils.exceptions import DatasetException, DependencyException, InvalidInputException

logger = structlog.get_logger(__name__)

MANIFEST_NAME = "manifest.json"
ARTIFACTS = ("img", "sino", "fbp")

# Modified Shepp-Logan head: (amplitude, a, b, x0, y0, phi in degrees)
SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized coordinates: the inscribed circle is the unit disk, y points up"""
    center = (size - 1) / 2.0
    idx = np.arange(size, dtype=np.float64)
    x = (idx[None, :] - center) / (size / 2.0)
    y = (center - idx[:, None]) / (size / 2.0)
    return np.broadcast_to(x, (size, size)), np.broadcast_to(y, (size, size))


def support_mask(size: int) -> np.ndarray:
    """Pixels whose centers lie at least one pixel inside the inscribed circle"""
    x, y = _grid(size)
    return np.hypot(x, y) <= 1.0 - 2.0 / size


def _ellipse(x, y, a, b, x0, y0, phi, size, edge_width) -> np.ndarray:
    """Soft indicator with a linear ramp of ``edge_width`` pixels across the boundary"""
    c, s = np.cos(phi), np.sin(phi)
    u = (x - x0) * c + (y - y0) * s
    v = -(x - x0) * s + (y - y0) * c
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    distance = (rho - 1.0) * min(a, b) * size / 2.0
    return np.clip(0.5 - distance / edge_width, 0.0, 1.0)


def _random_ellipses(spec: PhantomSpec, rng, image, x, y, count: int):
    low, high = spec.intensity_range
    for _ in range(count):
        a, b = rng.uniform(0.08, 0.45, size=2)
        reach = max(a, b)
        radius = rng.uniform(0.0, max(0.85 - reach, 0.0))
        angle = rng.uniform(0.0, 2.0 * np.pi)
        x0, y0 = radius * np.cos(angle), radius * np.sin(angle)
        weight = _ellipse(x, y, a, b, x0, y0, rng.uniform(0.0, np.pi), spec.size, spec.edge_width)
        image = image * (1.0 - weight) + rng.uniform(low, high) * weight
    return image


def _random_blobs(spec: PhantomSpec, rng, image, x, y, count: int):
    low, high = spec.intensity_range
    for _ in range(count):
        width = rng.uniform(0.04, 0.18)
        radius = rng.uniform(0.0, 0.85 - 2.0 * width)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        x0, y0 = radius * np.cos(angle), radius * np.sin(angle)
        weight = np.exp(-((x - x0) ** 2 + (y - y0) ** 2) / (2.0 * width * width))
        image = image * (1.0 - weight) + rng.uniform(low, high) * weight
    return image


def disk_phantom(size: int, radius: float = 0.35, intensity: float = 1.0, edge_width: float = 2.0) -> np.ndarray:
    """Centered soft-edged disk, radius as a fraction of the image side"""
    x, y = _grid(size)
    scale = 2.0 * radius
    image = intensity * _ellipse(x, y, scale, scale, 0.0, 0.0, 0.0, size, edge_width)
    return (image * support_mask(size)).astype(np.float32)


def shepp_logan(size: int) -> np.ndarray:
    """Modified Shepp-Logan head phantom, clipped to [0, 1]"""
    x, y = _grid(size)
    image = np.zeros((size, size))
    for amplitude, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES:
        c, s = np.cos(np.deg2rad(phi)), np.sin(np.deg2rad(phi))
        u = (x - x0) * c + (y - y0) * s
        v = -(x - x0) * s + (y - y0) * c
        image += amplitude * (((u / a) ** 2 + (v / b) ** 2) <= 1.0)
    return (np.clip(image, 0.0, 1.0) * support_mask(size)).astype(np.float32)


def generate_phantom(spec: PhantomSpec, item_id: int) -> np.ndarray:
    """
    Deterministic in (spec.seed, item_id); values in [0, 1], zero outside the
    inscribed circle.
    """
    if item_id < 0:
        raise InvalidInputException("Phantom ids are non-negative", error_code="INVALID_ID", details={"id": item_id})
    size = spec.size
    if spec.kind == "disk":
        return disk_phantom(size, spec.disk_radius, spec.intensity_range[1], max(spec.edge_width, 2.0))
    if spec.kind == "shepp_logan":
        return shepp_logan(size)

    rng = np.random.default_rng([spec.seed, item_id])
    x, y = _grid(size)
    image = np.zeros((size, size))
    if spec.kind == "ellipses":
        count = int(rng.integers(spec.ellipse_count[0], spec.ellipse_count[1] + 1))
        image = _random_ellipses(spec, rng, image, x, y, count)
    elif spec.kind == "blobs":
        count = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
        image = _random_blobs(spec, rng, image, x, y, count)
    else:
        image = _random_ellipses(
            spec, rng, image, x, y, max(1, int(rng.integers(spec.ellipse_count[0], spec.ellipse_count[1] + 1)) // 2)
        )
        image = _random_blobs(
            spec, rng, image, x, y, max(1, int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1)) // 2)
        )

    if spec.texture_strength > 0:
        noise = rng.standard_normal((size, size))
        if spec.texture_sigma > 0:
            noise = gaussian_filter(noise, spec.texture_sigma)
        noise /= max(float(noise.std()), 1e-12)
        image = image + spec.texture_strength * noise * (image > 0)
    return (np.clip(image, 0.0, 1.0) * support_mask(size)).astype(np.float32)


def _item_name(split: str, index: int) -> str:
    return f"{split}-{index:04d}"


def _write_item(root: Path, spec: PhantomSpec, geom: Geometry, split: str, index: int, item_id: int) -> ManifestItem:
    name = _item_name(split, index)
    image = generate_phantom(spec, item_id)
    sino = radon(image, geom)
    recon = fbp(sino)
    arrays = {"img": image, "sino": sino.values, "fbp": recon}
    files: Dict[str, str] = {}
    checksums: Dict[str, str] = {}
    for kind in ARTIFACTS:
        relative = f"{split}/{name}.{kind}.rnt"
        save_tensor(root / relative, arrays[kind], {"item": name, "phantom_id": item_id, "geometry": geom.tag()})
        files[kind] = relative
        checksums[kind] = file_sha256(root / relative)
    return ManifestItem(item_id=name, index=item_id, split=split, files=files, checksums=checksums)


def build_dataset(
    spec: PhantomSpec,
    n_train: int,
    n_test: int,
    geom: Geometry,
    root: Optional[Union[str, Path]] = None,
) -> DatasetManifest:
    """
    Write ``<root>/<split>/<id>.{img,sino,fbp}.rnt`` and ``<root>/manifest.json``.
    Train items use phantom ids [0, n_train), test items the next n_test ids.

    Raises:
        DatasetException: on empty splits, overlapping ids or IO failures
    """
    if n_test < 1 or n_train < 0:
        raise DatasetException(
            "Dataset needs n_test >= 1 and n_train >= 0",
            error_code="INVALID_SPLIT",
            details={"n_train": n_train, "n_test": n_test},
        )
    if spec.size != geom.size:
        raise InvalidInputException(
            "Phantom size differs from the geometry",
            error_code="SHAPE_MISMATCH",
            details={"spec": spec.size, "geometry": geom.size},
        )
    root = Path(root or settings.data_dir)
    jobs = [("train", i, i) for i in range(n_train)] + [("test", i, n_train + i) for i in range(n_test)]
    train_ids = {job[2] for job in jobs if job[0] == "train"}
    test_ids = {job[2] for job in jobs if job[0] == "test"}
    if train_ids & test_ids:
        raise DatasetException("Train and test phantom ids overlap", error_code="SPLIT_LEAK")

    logger.info("dataset_build_started", root=str(root), n_train=n_train, n_test=n_test, workers=settings.worker_count)
    try:
        with ThreadPoolExecutor(max_workers=settings.worker_count) as pool:
            items = list(pool.map(lambda job: _write_item(root, spec, geom, *job), jobs))
    except OSError as e:
        raise DatasetException(
            f"Could not write dataset under {root}",
            error_code="DATASET_IO",
            details={"root": str(root), "error": str(e)},
        )

    manifest = DatasetManifest(
        phantom_spec=spec.model_dump(mode="json"),
        geometry=geom.tag(),
        seed=spec.seed,
        splits={
            "train": [item.item_id for item in items if item.split == "train"],
            "test": [item.item_id for item in items if item.split == "test"],
        },
        items=items,
    )
    (root / MANIFEST_NAME).write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True))
    logger.info("dataset_build_finished", root=str(root), items=len(items))
    return manifest


def load_manifest(root: Union[str, Path]) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DependencyException(
            f"No dataset manifest at {path}", error_code="MANIFEST_NOT_FOUND", details={"path": str(path)}
        )
    return DatasetManifest(**json.loads(path.read_text()))


def verify_dataset(root: Union[str, Path], manifest: Optional[DatasetManifest] = None) -> List[str]:
    """Relative paths whose checksum no longer matches the manifest"""
    root = Path(root)
    manifest = manifest or load_manifest(root)
    bad = []
    for item in manifest.items:
        for kind, relative in item.files.items():
            path = root / relative
            if not path.exists() or file_sha256(path) != item.checksums[kind]:
                bad.append(relative)
    return bad


def load_split(
    root: Union[str, Path], split: str, manifest: Optional[DatasetManifest] = None, limit: Optional[int] = None
) -> Tuple[List[str], Dict[str, np.ndarray]]:
    """
    Stack one split into arrays.

    Returns:
        (item ids, {"img": [N,H,W], "sino": [N,A,D], "fbp": [N,H,W]})
    """
    root = Path(root)
    manifest = manifest or load_manifest(root)
    items = manifest.items_for(split)[:limit]
    if not items:
        raise DatasetException(f"Split '{split}' is empty", error_code="EMPTY_SPLIT", details={"split": split})
    arrays = {kind: np.stack([load_tensor(root / item.files[kind])[0] for item in items]) for kind in ARTIFACTS}
    return [item.item_id for item in items], arrays
