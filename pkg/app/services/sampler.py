"""
Reverse sampler: x0 extraction, range-space rectification, the posterior-mean
update with sigma_t noise, time travel and sample averaging.
"""

import time
from typing import List, Optional, Tuple

import numpy as np
import structlog

from app.models.config import SamplerConfig
from app.models.reports import SampleRecord, SampleTraceReport
from app.services.mrsde import (
    DiffusionSchedule,
    forward_transition,
    marginal_to_optimal_score,
    reverse_coeffs,
    time_travel_count,
)
from app.services.pinv import Measurement, PseudoInverse, _values, rectify
from app.services.score import ScoreFunction
from app.utils.exceptions import InvalidInputException, NumericalException

logger = structlog.get_logger(__name__)


def extract_x0(x_t, mu, t: int, score: ScoreFunction, sched: DiffusionSchedule, score_value=None) -> np.ndarray:
    """
    x_{0|t} = -(G/H) x_t + (sigma^2 / H) s dt + (1 + G/H) mu

    ``s`` is the posterior-mean (optimal) score. A marginal score is mapped to
    that form first, which makes x_{0|t} the exact E[x0 | x_t] for an exact
    marginal score. ``score_value`` skips the score evaluation when the caller
    already has it.
    """
    coeffs = reverse_coeffs(t, sched)
    if coeffs.H == 0:
        raise NumericalException("H_t vanished; x0 cannot be extracted", error_code="ZERO_H", details={"t": t})
    x_t = np.asarray(x_t, dtype=np.float64)
    s = score.evaluate(x_t, mu, t) if score_value is None else score_value
    if getattr(score, "form", "marginal") == "marginal":
        s = marginal_to_optimal_score(x_t, s, mu, t, sched)
    ratio = coeffs.G / coeffs.H
    return -ratio * x_t + (sched.sigma2_at(t) / coeffs.H) * np.asarray(s) * sched.dt + (1.0 + ratio) * np.asarray(mu)


def reverse_step(
    x_t, x0_hat, mu, t: int, sched: DiffusionSchedule, rng: Optional[np.random.Generator], noise: bool = True
) -> np.ndarray:
    """
    x_{t-1} = coefA (x_t - mu) + H (x0_hat - mu) + mu + sigma_t sqrt(dt) eps.
    The last step (t = 1) adds no noise, and neither does ``noise=False``.
    """
    coeffs = reverse_coeffs(t, sched)
    x_t = np.asarray(x_t, dtype=np.float64)
    if t == 1:
        # coefA_1 == 0 and H_1 == 1 exactly
        return np.array(x0_hat, dtype=np.float64, copy=True)
    out = coeffs.coefA * (x_t - mu) + coeffs.H * (np.asarray(x0_hat) - mu) + mu
    if noise:
        out = out + sched.sigma_at(t) * np.sqrt(sched.dt) * rng.standard_normal(out.shape)
    return out


def _gamma(cfg: SamplerConfig, t: int, sched: DiffusionSchedule) -> float:
    """Gamma_t = alpha sigma_t sqrt(dt) / H_t, clamped to [0, 1]"""
    coeffs = reverse_coeffs(t, sched)
    return float(np.clip(cfg.rescale_alpha * sched.sigma_at(t) * np.sqrt(sched.dt) / coeffs.H, 0.0, 1.0))


class _Chain:
    """One Markov chain: state, trace and the per-step x0 handling"""

    def __init__(self, y, mu, score, pinv, sched, cfg, rng):
        self.y = y
        self.mu = mu
        self.score = score
        self.pinv = pinv
        self.sched = sched
        self.cfg = cfg
        self.rng = rng
        self.records: List[SampleRecord] = []

    def consistency(self, x: np.ndarray) -> float:
        if self.y is None or self.pinv is None:
            return float("nan")
        return float(np.linalg.norm(self.pinv.forward(x) - self.y))

    def step(self, x_t: np.ndarray, t: int) -> np.ndarray:
        x0t = extract_x0(x_t, self.mu, t, self.score, self.sched)
        raw = self.consistency(x0t)
        rectified = bool(self.cfg.rectify) and t % self.cfg.skip_beta != 0
        gamma = 0.0
        x0_hat = x0t
        if rectified:
            gamma = _gamma(self.cfg, t, self.sched)
            x0_hat = np.asarray(rectify(x0t, self.y, self.pinv, gamma), dtype=np.float64)
        post = self.consistency(x0_hat) if rectified else raw
        self.records.append(
            SampleRecord(
                t=t, kind="reverse", consistency_error=post, raw_consistency_error=raw, rectified=rectified, gamma=gamma
            )
        )
        x_prev = reverse_step(x_t, x0_hat, self.mu, t, self.sched, self.rng)
        if not np.all(np.isfinite(x_prev)):
            raise NumericalException(
                f"Sampler state became non-finite at t = {t}",
                error_code="NAN_STATE",
                details={"t": t, "trace": [r.model_dump() for r in self.records]},
            )
        return x_prev

    def travel(self, x: np.ndarray, start: int, length: int) -> np.ndarray:
        """Re-noise start -> start + length one exact transition at a time"""
        for u in range(start, start + length):
            x = forward_transition(x, self.mu, u, u + 1, self.sched, self.rng).astype(np.float64)
            self.records.append(
                SampleRecord(
                    t=u + 1,
                    kind="travel",
                    consistency_error=float("nan"),
                    raw_consistency_error=float("nan"),
                )
            )
        return x


def sample(
    y: Optional[Measurement],
    mu: np.ndarray,
    score: ScoreFunction,
    pinv: Optional[PseudoInverse],
    sched: DiffusionSchedule,
    cfg: SamplerConfig,
    seed: Optional[int] = None,
) -> Tuple[np.ndarray, SampleTraceReport]:
    """
    Run the reverse chain from x_T ~ N(mu, lambda^2) down to x_0.

    With travel_r > 1, after every travel_l reverse steps (while at least one
    step remains) the state is re-noised travel_l steps and the block is
    redone, travel_r - 1 extra times. The trace gets one record per reverse or
    re-noising step plus a final record, matching ``time_travel_count``.

    Raises:
        GeometryMismatchException: y was measured with a different geometry than the pseudo-inverse
        NumericalException: the state became NaN/inf (details carry the trace so far)
    """
    if cfg.T is not None and cfg.T != sched.T:
        raise InvalidInputException(
            "Sampler T differs from the schedule",
            error_code="SCHEDULE_MISMATCH",
            details={"sampler": cfg.T, "schedule": sched.T},
        )
    seed = cfg.seed if seed is None else seed
    mu = np.asarray(mu, dtype=np.float64)
    values = None
    if y is not None:
        if pinv is None:
            raise InvalidInputException("A measurement needs a pseudo-inverse", error_code="MISSING_PINV")
        values = np.asarray(_values(y, pinv), dtype=np.float64)
        if pinv.geometry is not None:
            pinv.geometry.require_image(mu)
    elif cfg.rectify:
        raise InvalidInputException("Rectification needs a measurement", error_code="MISSING_MEASUREMENT")

    rng = np.random.default_rng(seed)
    chain = _Chain(values, mu, score, pinv, sched, cfg, rng)
    started = time.perf_counter()

    x = mu + np.sqrt(sched.lambda2) * rng.standard_normal(mu.shape)
    l, r = cfg.travel_l, cfg.travel_r
    done = 0
    for t in range(sched.T, 0, -1):
        x = chain.step(x, t)
        done += 1
        current = t - 1
        if r > 1 and done % l == 0 and current >= 1:
            for _ in range(r - 1):
                x = chain.travel(x, current, l)
                for u in range(current + l, current, -1):
                    x = chain.step(x, u)

    final = chain.consistency(x)
    chain.records.append(SampleRecord(t=0, kind="final", consistency_error=final, raw_consistency_error=final))
    expected = time_travel_count(sched.T, l, r)
    trace = SampleTraceReport(
        seed=int(seed), T=sched.T, travel_l=l, travel_r=r, expected_length=expected, records=chain.records
    )
    if trace.length != expected:
        raise NumericalException(
            "Trace length does not match the iteration count",
            error_code="TRACE_LENGTH",
            details={"length": trace.length, "expected": expected},
        )
    logger.debug(
        "sample_finished",
        seed=int(seed),
        iterations=trace.length,
        final_consistency=final,
        seconds=round(time.perf_counter() - started, 3),
    )
    return x.astype(np.float32), trace


def sample_average(
    y: Optional[Measurement],
    mu: np.ndarray,
    score: ScoreFunction,
    pinv: Optional[PseudoInverse],
    sched: DiffusionSchedule,
    cfg: SamplerConfig,
) -> np.ndarray:
    """Pixel-wise mean of sa_count chains seeded cfg.seed, cfg.seed + 1, ..."""
    if cfg.sa_count < 1:
        raise InvalidInputException("sa_count must be >= 1", error_code="INVALID_SA_COUNT")
    total = None
    for i in range(cfg.sa_count):
        image, _ = sample(y, mu, score, pinv, sched, cfg, seed=cfg.seed + i)
        total = image.astype(np.float64) if total is None else total + image
    if cfg.sa_count == 1:
        return total.astype(np.float32)
    return (total / cfg.sa_count).astype(np.float32)
