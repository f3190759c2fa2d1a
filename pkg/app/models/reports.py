from datetime import datetime, timezone
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class ErrorResponse(BaseModel):
    success: bool = False
    error: str
    error_code: Optional[str] = None
    details: Optional[Dict[str, Any]] = None


class SampleRecord(BaseModel):
    t: int = Field(..., ge=0, description="Diffusion step the record belongs to")
    kind: Literal["reverse", "travel", "final"]
    consistency_error: float = Field(..., description="||A x0_hat - y|| after rectification")
    raw_consistency_error: float = Field(..., description="||A x0_t - y|| before rectification")
    rectified: bool = False
    gamma: float = 0.0


class SampleTraceReport(BaseModel):
    seed: int
    T: int
    travel_l: int
    travel_r: int
    expected_length: int
    records: List[SampleRecord] = []

    @property
    def length(self) -> int:
        return len(self.records)


class MetricRow(BaseModel):
    method: str
    theta_miss: float
    psnr: float
    psnr_std: float = 0.0
    ssim: float
    ssim_std: float = 0.0
    consistency: float
    consistency_std: float = 0.0
    n_items: int
    n_runs: int = 1
    psnr_infinite: bool = Field(False, description="Set when any image matched its reference exactly")


class ItemMetric(BaseModel):
    item_id: str
    method: str
    theta_miss: float
    psnr: float
    ssim: float
    consistency: float


class MetricReport(BaseModel):
    experiment: str
    created_at: datetime = Field(default_factory=_utcnow)
    rows: List[MetricRow] = []
    items: List[ItemMetric] = []
    metadata: Dict[str, Any] = {}

    def row(self, method: str, theta_miss: float) -> Optional[MetricRow]:
        for row in self.rows:
            if row.method == method and abs(row.theta_miss - theta_miss) < 1e-9:
                return row
        return None


class AblationRow(BaseModel):
    setting: Dict[str, Any]
    psnr: float
    ssim: float
    consistency: float


class AblationReport(BaseModel):
    experiment: str
    sweep: str
    created_at: datetime = Field(default_factory=_utcnow)
    rows: List[AblationRow] = []
    metadata: Dict[str, Any] = {}


class TrainingReport(BaseModel):
    kind: Literal["pinv", "score", "restorer"]
    steps: int
    initial_loss: float
    final_loss: float
    best_loss: float
    best_step: int
    losses: List[float] = []
    alpha_schedule: Optional[List[float]] = None
    validation: Dict[str, float] = {}
    metadata: Dict[str, Any] = {}


class CorrespondenceReport(BaseModel):
    T: int
    max_mean_deviation: float
    max_variance_deviation: float
    worst_step: int
    mean_deviation: List[float] = []
    variance_deviation: List[float] = []


class ManifestItem(BaseModel):
    item_id: str
    index: int
    split: Literal["train", "test"]
    files: Dict[str, str]
    checksums: Dict[str, str]


class DatasetManifest(BaseModel):
    phantom_spec: Dict[str, Any]
    geometry: Dict[str, Any]
    seed: int
    splits: Dict[str, List[str]]
    items: List[ManifestItem] = []

    def items_for(self, split: str) -> List[ManifestItem]:
        return [item for item in self.items if item.split == split]

    def item(self, item_id: str) -> Optional[ManifestItem]:
        for item in self.items:
            if item.item_id == item_id:
                return item
        return None


class RunReport(BaseModel):
    command: str
    experiment: str
    success: bool = True
    started_at: datetime = Field(default_factory=_utcnow)
    wall_time_s: float = 0.0
    config: Dict[str, Any] = {}
    input_hash: str = ""
    seeds: Dict[str, int] = {}
    outputs: Dict[str, str] = {}
    result: Dict[str, Any] = {}
