"""
TV-regularized reconstruction baseline:

    min_x 1/2 ||A x - y||^2 + lambda_tv TV(x),  0 <= x <= 1

Proximal gradient on the data term; the TV-plus-box prox is solved in the dual
by Chambolle-style projected gradient, warm-started across outer iterations.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import structlog

from app.models.geometry import Geometry, Sinogram
from app.services.tomography import fbp, operator_for
from app.utils.exceptions import InvalidInputException, NumericalException

logger = structlog.get_logger(__name__)

MAX_HALVINGS = 30


@dataclass
class TVResult:
    image: np.ndarray
    objective: List[float] = field(default_factory=list)
    step: float = 0.0
    accepted: int = 0
    rejected: int = 0


def _grad(u: np.ndarray) -> np.ndarray:
    g = np.zeros((2,) + u.shape)
    g[0, :, :-1] = u[:, 1:] - u[:, :-1]
    g[1, :-1, :] = u[1:, :] - u[:-1, :]
    return g


def _div(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of _grad"""
    px, py = p
    d = np.zeros(px.shape)
    d[:, 0] = px[:, 0]
    d[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    d[:, -1] = -px[:, -2]
    d[0, :] += py[0, :]
    d[1:-1, :] += py[1:-1, :] - py[:-2, :]
    d[-1, :] += -py[-2, :]
    return d


def total_variation(u: np.ndarray) -> float:
    g = _grad(np.asarray(u, dtype=np.float64))
    return float(np.sum(np.sqrt(g[0] ** 2 + g[1] ** 2)))


def operator_norm_sq(geom: Geometry, iters: int = 30, seed: int = 0) -> float:
    """||A||^2 by power iteration on A^T A"""
    operator = operator_for(geom)
    v = np.random.default_rng(seed).standard_normal(geom.image_shape)
    value = 0.0
    for _ in range(iters):
        v = v / np.linalg.norm(v)
        w = operator.adjoint(operator.project(v))
        value = float(np.vdot(v, w))
        v = w
    return value


def _prox(
    v: np.ndarray, weight: float, p: np.ndarray, inner: int, box: Tuple[float, float]
) -> Tuple[np.ndarray, np.ndarray]:
    """argmin_u 1/2 ||u - v||^2 + weight TV(u) over the box, dual variable p updated in place"""
    low, high = box
    if weight <= 0:
        return np.clip(v, low, high), p
    tau = 1.0 / (8.0 * weight)
    for _ in range(inner):
        u = np.clip(v + weight * _div(p), low, high)
        p = p + tau * _grad(u)
        norm = np.maximum(1.0, np.sqrt(p[0] ** 2 + p[1] ** 2))
        p = p / norm
    return np.clip(v + weight * _div(p), low, high), p


def tv_reconstruct(
    y: Sinogram,
    geom: Geometry,
    lambda_tv: float,
    iters: int,
    inner_iters: int = 10,
    box: Tuple[float, float] = (0.0, 1.0),
    x_init: Optional[np.ndarray] = None,
) -> TVResult:
    """
    Starts from the clipped FBP reconstruction. A step whose objective would
    rise is retried with half the step size (up to 30 times); when no retry
    helps the solver stops, so the objective history never increases.

    Raises:
        NumericalException: the objective became NaN or infinite
    """
    if lambda_tv < 0:
        raise InvalidInputException("lambda_tv must be non-negative", error_code="INVALID_LAMBDA")
    geom.require_same(y.geometry, "measurement")
    operator = operator_for(geom)
    values = np.asarray(y.values, dtype=np.float64)

    def objective(x: np.ndarray) -> float:
        residual = operator.project(x) - values
        return 0.5 * float(np.sum(residual * residual)) + lambda_tv * total_variation(x)

    x = np.clip(fbp(y) if x_init is None else x_init, *box).astype(np.float64)
    step = 1.0 / max(operator_norm_sq(geom), 1e-12)
    p = np.zeros((2,) + geom.image_shape)
    result = TVResult(image=x, objective=[objective(x)], step=step)

    for it in range(iters):
        gradient = operator.adjoint(operator.project(x) - values)
        trial_step = step
        for _ in range(MAX_HALVINGS):
            candidate, p_candidate = _prox(
                x - trial_step * gradient, trial_step * lambda_tv, p.copy(), inner_iters, box
            )
            value = objective(candidate)
            if not np.isfinite(value):
                raise NumericalException(
                    "TV objective diverged", error_code="TV_DIVERGED", details={"iteration": it, "step": trial_step}
                )
            if value <= result.objective[-1]:
                break
            result.rejected += 1
            trial_step *= 0.5
        else:
            logger.debug("tv_stalled", iteration=it, objective=result.objective[-1])
            break
        x, p = candidate, p_candidate
        result.objective.append(value)
        result.accepted += 1

    result.image = x.astype(np.float32)
    logger.debug(
        "tv_finished",
        iterations=result.accepted,
        rejected=result.rejected,
        objective=result.objective[-1],
        lambda_tv=lambda_tv,
    )
    return result
