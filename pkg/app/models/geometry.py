"""
Parallel-beam projection geometry and the sinogram container
"""

from dataclasses import dataclass
from typing import Any, Dict

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.utils.exceptions import GeometryMismatchException, ShapeMismatchException


class Geometry(BaseModel):
    """
    Parallel-beam geometry for a square image of side ``size``.

    Angles run from 0 at a uniform ``angle_step`` up to 180 - theta_miss degrees
    (inclusive), always staying below 180. The missing wedge is encoded by
    omitting angles, never by zero rows.
    """

    model_config = ConfigDict(frozen=True)

    size: int = Field(64, ge=2, description="Image side length in pixels")
    num_detectors: int = Field(0, ge=0, description="Detector bins D; 0 means D = size")
    angle_step: float = Field(2.0, gt=0.0, le=90.0, description="Angular sampling in degrees")
    theta_miss: float = Field(0.0, ge=0.0, lt=180.0, description="Missing wedge in degrees")

    @model_validator(mode="before")
    @classmethod
    def _default_detectors(cls, data):
        if isinstance(data, dict) and not data.get("num_detectors"):
            data = {**data, "num_detectors": data.get("size", 64)}
        return data

    @model_validator(mode="after")
    def _check_detectors(self):
        if self.num_detectors < 2:
            raise ValueError("Geometry needs at least two detector bins")
        return self

    @property
    def num_angles(self) -> int:
        limit = 180.0 - self.theta_miss
        count = int(np.floor(limit / self.angle_step + 1e-9)) + 1
        if (count - 1) * self.angle_step >= 180.0 - 1e-9:
            count -= 1
        return max(count, 1)

    @property
    def angles_deg(self) -> np.ndarray:
        # k * step (not a cumulative sum) so every geometry shares the same prefix values
        return np.arange(self.num_angles, dtype=np.float64) * self.angle_step

    @property
    def angles(self) -> np.ndarray:
        return np.deg2rad(self.angles_deg)

    @property
    def sinogram_shape(self) -> tuple:
        return (self.num_angles, self.num_detectors)

    @property
    def image_shape(self) -> tuple:
        return (self.size, self.size)

    def with_theta_miss(self, theta_miss: float) -> "Geometry":
        return self.model_copy(update={"theta_miss": float(theta_miss)})

    def tag(self) -> Dict[str, Any]:
        """Geometry tag stored with checkpoints and sinograms"""
        return {
            "size": self.size,
            "num_detectors": self.num_detectors,
            "angle_step": self.angle_step,
            "theta_miss": self.theta_miss,
        }

    @classmethod
    def from_tag(cls, tag: Dict[str, Any]) -> "Geometry":
        return cls(**tag)

    def require_same(self, other: "Geometry", what: str = "operand"):
        if self.tag() != other.tag():
            raise GeometryMismatchException(
                f"Geometry of {what} does not match",
                error_code="GEOMETRY_MISMATCH",
                details={"expected": self.tag(), "actual": other.tag()},
            )

    def require_image(self, image: np.ndarray):
        if tuple(np.shape(image)[-2:]) != self.image_shape:
            raise ShapeMismatchException(
                "Image shape does not match geometry",
                error_code="SHAPE_MISMATCH",
                details={"expected": list(self.image_shape), "actual": list(np.shape(image))},
            )


@dataclass
class Sinogram:
    geometry: Geometry
    values: np.ndarray

    def __post_init__(self):
        if tuple(np.shape(self.values)[-2:]) != self.geometry.sinogram_shape:
            raise ShapeMismatchException(
                "Sinogram rows must match geometry angles and detectors",
                error_code="SHAPE_MISMATCH",
                details={
                    "expected": list(self.geometry.sinogram_shape),
                    "actual": list(np.shape(self.values)),
                },
            )

    def __mul__(self, scale: float) -> "Sinogram":
        return Sinogram(self.geometry, self.values * scale)

    __rmul__ = __mul__

    def __add__(self, other: "Sinogram") -> "Sinogram":
        self.geometry.require_same(other.geometry, "sinogram")
        return Sinogram(self.geometry, self.values + other.values)

    def __sub__(self, other: "Sinogram") -> "Sinogram":
        self.geometry.require_same(other.geometry, "sinogram")
        return Sinogram(self.geometry, self.values - other.values)
