from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.geometry import Geometry


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeometryConfig(_Section):
    size: int = Field(64, ge=8, description="Image side length in pixels")
    angle_step: float = Field(2.0, gt=0.0, le=90.0, description="Projection every angle_step degrees")
    theta_miss: float = Field(90.0, ge=0.0, lt=180.0, description="Missing wedge in degrees")
    num_detectors: Optional[int] = Field(default=None, ge=2, description="Defaults to the image width")

    def build(self, theta_miss: Optional[float] = None) -> Geometry:
        return Geometry(
            size=self.size,
            num_detectors=self.num_detectors or self.size,
            angle_step=self.angle_step,
            theta_miss=self.theta_miss if theta_miss is None else theta_miss,
        )


class ScheduleConfig(_Section):
    T: int = Field(100, ge=1, description="Number of diffusion steps")
    lambda2: float = Field(0.01, gt=0.0, description="Stationary variance of the mean-reverting SDE")
    kind: Literal["cosine", "linear", "constant"] = "cosine"


class SamplerConfig(_Section):
    T: Optional[int] = Field(default=None, ge=1, description="Must equal schedule.T when given")
    rescale_alpha: float = Field(0.5, ge=0.0, description="Range-space correction strength")
    skip_beta: int = Field(3, ge=1, description="Rectification is skipped when t mod skip_beta == 0")
    travel_l: int = Field(1, ge=1, description="Time-travel block length")
    travel_r: int = Field(1, ge=1, description="Time-travel repetitions (1 disables)")
    sa_count: int = Field(8, ge=1, description="Samples averaged for sampling-average")
    seed: int = 0
    rectify: bool = True
    mu_source: Literal["fbp", "restorer"] = "fbp"


class PhantomSpec(_Section):
    size: int = Field(64, ge=8)
    kind: Literal["ellipses", "blobs", "mixed", "disk", "shepp_logan"] = "mixed"
    ellipse_count: Tuple[int, int] = (3, 8)
    blob_count: Tuple[int, int] = (4, 12)
    intensity_range: Tuple[float, float] = (0.1, 0.9)
    texture_sigma: float = Field(2.0, ge=0.0, description="Gaussian width (pixels) of the texture noise")
    texture_strength: float = Field(0.08, ge=0.0, le=1.0)
    edge_width: float = Field(1.0, gt=0.0, description="Soft-edge width in pixels")
    disk_radius: float = Field(0.35, gt=0.0, lt=0.5, description="Disk radius as a fraction of the image side")
    seed: int = 0

    @field_validator("ellipse_count", "blob_count")
    @classmethod
    def validate_count_range(cls, v):
        low, high = v
        if low < 1 or high < low:
            raise ValueError("Count range must satisfy 1 <= low <= high")
        return v

    @field_validator("intensity_range")
    @classmethod
    def validate_intensity_range(cls, v):
        low, high = v
        if not 0.0 <= low <= high <= 1.0:
            raise ValueError("Intensity range must lie inside [0, 1]")
        return v


class DatasetConfig(_Section):
    n_train: int = Field(64, ge=1)
    n_test: int = Field(24, ge=1)
    n_val: int = Field(8, ge=0, description="Held-out items carved from the training split")


class PinvTrainConfig(_Section):
    steps_phase1: int = Field(600, ge=0)
    steps_phase2: int = Field(400, ge=0)
    alpha_pinv: float = Field(0.2, ge=0.0, le=1.0, description="Weight of the image-domain loss in phase 2")
    batch_size: int = Field(8, ge=1)
    lr: float = Field(5e-4, gt=0.0)
    lr_min: float = Field(1e-6, ge=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    width: int = Field(16, ge=2)
    blocks: int = Field(3, ge=0)
    refine_steps: int = Field(6, ge=0, description="Learned data-consistency steps after the back-projection")
    eval_every: int = Field(25, ge=1)
    seed: int = 0

    @property
    def alpha_schedule(self) -> List[float]:
        return [0.0, self.alpha_pinv]


class NetworkTrainConfig(_Section):
    steps: int = Field(500, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(5e-4, gt=0.0)
    lr_min: float = Field(1e-6, ge=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    width: int = Field(32, ge=2)
    blocks: int = Field(4, ge=1)
    emb_dim: int = Field(32, ge=2)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    loss: Literal["l2", "l1"] = "l2"
    eval_every: int = Field(25, ge=1)
    fixed_batch: bool = Field(False, description="Reuse the first batch (and its noise) every step")
    seed: int = 0

    @field_validator("emb_dim")
    @classmethod
    def validate_emb_dim(cls, v):
        if v % 2:
            raise ValueError("Time embedding dimension must be even")
        return v


class TrainingConfig(_Section):
    pinv: PinvTrainConfig = PinvTrainConfig()
    score: NetworkTrainConfig = NetworkTrainConfig()
    restorer: NetworkTrainConfig = NetworkTrainConfig(width=16, blocks=2, dropout=0.0)


class EvaluationConfig(_Section):
    theta_miss_list: List[float] = [60.0, 90.0, 120.0]
    n_runs: int = Field(10, ge=1)
    lambda_tv: float = Field(0.5, gt=0.0)
    tv_iters: int = Field(150, ge=1)
    max_items: Optional[int] = Field(default=None, ge=1)
    methods: List[
        Literal["fbp", "tv", "pinv", "rnsde_norect", "rnsde", "rnsde_sa"]
    ] = ["fbp", "tv", "pinv", "rnsde_norect", "rnsde", "rnsde_sa"]


class PathsConfig(_Section):
    data_dir: Optional[Path] = None
    runs_dir: Optional[Path] = None


class RunConfig(_Section):
    experiment: str = Field("default", min_length=1, pattern=r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")
    seed: int = 0
    geometry: GeometryConfig = GeometryConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    sampler: SamplerConfig = SamplerConfig()
    phantoms: PhantomSpec = PhantomSpec()
    dataset: DatasetConfig = DatasetConfig()
    training: TrainingConfig = TrainingConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    paths: PathsConfig = PathsConfig()

    @model_validator(mode="after")
    def validate_consistency(self):
        if self.sampler.T is not None and self.sampler.T != self.schedule.T:
            raise ValueError("sampler.T must equal schedule.T")
        # Phantoms always follow the reconstruction grid
        self.phantoms.size = self.geometry.size
        if self.dataset.n_val >= self.dataset.n_train:
            raise ValueError("dataset.n_val must leave at least one training item")
        return self

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "experiment": "desk-90",
                "geometry": {"size": 64, "angle_step": 2.0, "theta_miss": 90.0},
                "schedule": {"T": 100, "lambda2": 0.01},
                "sampler": {"rescale_alpha": 0.5, "skip_beta": 3, "sa_count": 8, "seed": 7},
            }
        },
    )
