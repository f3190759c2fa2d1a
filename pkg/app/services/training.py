"""
Helpers shared by the three training loops (pseudo-inverse, score, restorer)
"""

import csv
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import structlog
from tqdm import tqdm

from app.core.config import settings
from app.utils.exceptions import DivergenceException

logger = structlog.get_logger(__name__)


def progress(total: int, desc: str) -> Iterable[int]:
    return tqdm(range(total), desc=desc, disable=not settings.progress, leave=False, dynamic_ncols=True)


def check_finite_loss(value: float, step: int, kind: str, losses: Sequence[float], **details):
    """
    Raises:
        DivergenceException: when the loss is NaN or infinite, with the recent loss history attached
    """
    if np.isfinite(value):
        return
    logger.error("training_diverged", kind=kind, step=step, loss=float(value), **details)
    raise DivergenceException(
        f"{kind} training diverged at step {step}",
        error_code="TRAINING_DIVERGED",
        details={"kind": kind, "step": step, "recent_losses": [float(v) for v in losses[-10:]], **details},
    )


def smoothed(losses: Sequence[float], window: int = 50) -> np.ndarray:
    """Non-overlapping window means, the curve the monotonicity checks look at"""
    values = np.asarray(losses, dtype=np.float64)
    count = len(values) // window
    if count == 0:
        return values.copy() if len(values) == 0 else np.array([values.mean()])
    return values[: count * window].reshape(count, window).mean(axis=1)


def write_loss_curve(path: Union[str, Path], losses: Sequence[float], extra: Optional[dict] = None):
    """CSV with columns step, loss (plus any per-step extra columns of equal length)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = extra or {}
    columns: List[str] = ["step", "loss", *extra.keys()]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for step, loss in enumerate(losses):
            writer.writerow([step, repr(float(loss)), *(repr(float(v[step])) for v in extra.values())])
