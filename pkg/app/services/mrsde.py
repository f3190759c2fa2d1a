"""
Mean-reverting SDE dx = theta_t (mu - x) dt + sigma_t dw with sigma_t^2 = 2 lambda^2 theta_t.

Discrete steps use dt = 1, so theta'_t = theta_bar_t - theta_bar_{t-1} = theta_t.
"""

from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np

from app.models.reports import CorrespondenceReport
from app.utils.exceptions import InvalidInputException, NumericalException

ScheduleKind = Literal["cosine", "linear", "constant"]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    lambda2: float
    kind: str
    theta: np.ndarray  # [T], theta[t - 1] belongs to step t
    sigma2: np.ndarray  # [T]
    theta_bar: np.ndarray  # [T + 1], theta_bar[0] == 0
    dt: float = 1.0

    def theta_at(self, t: int) -> float:
        return float(self.theta[t - 1])

    def sigma2_at(self, t: int) -> float:
        return float(self.sigma2[t - 1])

    def sigma_at(self, t: int) -> float:
        return float(np.sqrt(self.sigma2[t - 1]))

    def bar(self, t: int) -> float:
        return float(self.theta_bar[t])

    def variance(self, t: int) -> float:
        """v_t = lambda^2 (1 - exp(-2 theta_bar_t))"""
        return float(-self.lambda2 * np.expm1(-2.0 * self.theta_bar[t]))

    def check_step(self, t: int, allow_zero: bool = True):
        low = 0 if allow_zero else 1
        if not (low <= t <= self.T):
            raise InvalidInputException(
                f"Step {t} outside [{low}, {self.T}]",
                error_code="STEP_OUT_OF_RANGE",
                details={"t": int(t), "T": self.T},
            )

    def to_report(self) -> dict:
        return {
            "T": self.T,
            "lambda2": self.lambda2,
            "kind": self.kind,
            "theta_bar": [float(v) for v in self.theta_bar],
        }


def make_schedule(
    T: int, lambda2: float, kind: ScheduleKind = "cosine", terminal_ratio: float = 1e-4
) -> DiffusionSchedule:
    """
    Build a schedule whose cumulative theta_bar_T equals -ln(terminal_ratio),
    so exp(-theta_bar_T) == terminal_ratio and x_T is close to N(mu, lambda^2).

    Kinds:
        cosine: theta_bar_t = theta_bar_T (1 - cos(pi t / T)) / 2
        linear: theta_t proportional to t
        constant: theta_t = theta_bar_T / T
    """
    if int(T) < 1:
        raise InvalidInputException("Schedule needs T >= 1", error_code="INVALID_SCHEDULE", details={"T": T})
    if not lambda2 > 0:
        raise InvalidInputException(
            "lambda2 must be positive", error_code="INVALID_SCHEDULE", details={"lambda2": lambda2}
        )
    if not 0 < terminal_ratio < 1:
        raise InvalidInputException(
            "terminal_ratio must lie in (0, 1)",
            error_code="INVALID_SCHEDULE",
            details={"terminal_ratio": terminal_ratio},
        )

    T = int(T)
    terminal = -np.log(terminal_ratio)
    steps = np.arange(T + 1, dtype=np.float64)
    if kind == "cosine":
        theta_bar = terminal * (1.0 - np.cos(np.pi * steps / T)) / 2.0
    elif kind == "linear":
        theta_bar = terminal * steps * (steps + 1.0) / (T * (T + 1.0))
    elif kind == "constant":
        theta_bar = terminal * steps / T
    else:
        raise InvalidInputException(
            f"Unknown schedule kind: {kind}", error_code="INVALID_SCHEDULE", details={"kind": kind}
        )
    theta_bar[0] = 0.0
    theta_bar[-1] = terminal
    theta = np.diff(theta_bar)
    if np.any(theta <= 0):
        raise NumericalException("Schedule produced a non-positive theta", error_code="INVALID_SCHEDULE")

    for array in (theta, theta_bar):
        array.setflags(write=False)
    sigma2 = 2.0 * lambda2 * theta
    sigma2.setflags(write=False)
    return DiffusionSchedule(T=T, lambda2=float(lambda2), kind=kind, theta=theta, sigma2=sigma2, theta_bar=theta_bar)


def time_travel_count(T: int, l: int, r: int) -> int:
    """Total sampler iterations with time travel: T + 2 l (r - 1) floor((T - 1) / l) + 1"""
    if T < 1 or l < 1 or r < 1:
        raise InvalidInputException(
            "T, l and r must be positive", error_code="INVALID_TRAVEL", details={"T": T, "l": l, "r": r}
        )
    return T + 2 * l * (r - 1) * ((T - 1) // l) + 1


def forward_marginal(x0, mu, t: int, sched: DiffusionSchedule) -> Tuple[np.ndarray, float]:
    """Mean and variance of x_t given x_0"""
    sched.check_step(t)
    x0 = np.asarray(x0)
    if t == 0:
        return np.broadcast_to(x0, np.broadcast_shapes(x0.shape, np.shape(mu))).copy(), 0.0
    mean = mu + (x0 - mu) * np.exp(-sched.bar(t))
    return mean, sched.variance(t)


def forward_transition(x_s, mu, s: int, t: int, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Draw x_t given x_s from the exact Ornstein-Uhlenbeck kernel"""
    if s >= t:
        raise InvalidInputException(
            "forward_transition needs s < t", error_code="INVALID_TRANSITION", details={"s": s, "t": t}
        )
    sched.check_step(s)
    sched.check_step(t)
    x_s = np.asarray(x_s)
    delta = sched.bar(t) - sched.bar(s)
    mean = mu + (x_s - mu) * np.exp(-delta)
    std = np.sqrt(-sched.lambda2 * np.expm1(-2.0 * delta))
    noise = rng.standard_normal(np.shape(mean))
    return (mean + std * noise).astype(np.result_type(x_s.dtype, np.float32), copy=False)


@dataclass(frozen=True)
class ReverseCoeffs:
    t: int
    G: float
    H: float
    theta_prime: float
    coefA: float


def reverse_coeffs(t: int, sched: DiffusionSchedule) -> ReverseCoeffs:
    """
    Posterior-mean coefficients of step t:

        G_t = ((1 - e^{-2 bar_{t-1}}) / (1 - e^{-2 bar_t})) e^{-theta'_t} - theta'_t - 1
        H_t = ((1 - e^{-2 theta'_t}) / (1 - e^{-2 bar_t})) e^{-bar_{t-1}}
        coefA_t = G_t + theta'_t + 1
    """
    sched.check_step(t, allow_zero=False)
    previous = sched.bar(t - 1)
    current = sched.bar(t)
    theta_prime = current - previous
    denominator = -np.expm1(-2.0 * current)
    coef_a = (-np.expm1(-2.0 * previous) / denominator) * np.exp(-theta_prime)
    h = (-np.expm1(-2.0 * theta_prime) / denominator) * np.exp(-previous)
    return ReverseCoeffs(
        t=t,
        G=float(coef_a - theta_prime - 1.0),
        H=float(h),
        theta_prime=float(theta_prime),
        coefA=float(coef_a),
    )


def conditional_score(x_t, x0, mu, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """Score of p(x_t | x_0): -(x_t - m_t) / v_t"""
    if t == 0:
        raise InvalidInputException(
            "Conditional score is undefined at t = 0 (zero variance)", error_code="ZERO_VARIANCE", details={"t": 0}
        )
    mean, variance = forward_marginal(x0, mu, t, sched)
    return -(np.asarray(x_t) - mean) / variance


def optimal_score(x_t, x0, mu, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """Score that makes the reverse step land on the posterior mean: (G (x_t - mu) + H (x0 - mu)) / (sigma^2 dt)"""
    coeffs = reverse_coeffs(t, sched)
    x_t = np.asarray(x_t)
    return (coeffs.G * (x_t - mu) + coeffs.H * (np.asarray(x0) - mu)) / (sched.sigma2_at(t) * sched.dt)


def marginal_to_optimal_score(x_t, score, mu, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """
    Map a score of p(x_t) to the posterior-mean form used by ``optimal_score``.

    Both forms are affine in x0, so the conditional expectation of the optimal
    score given x_t is the optimal score at E[x0 | x_t], and
    E[x0 | x_t] = mu + e^{bar_t} (x_t - mu + v_t s).
    """
    sched.check_step(t, allow_zero=False)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_mean = mu + np.exp(sched.bar(t)) * (x_t - mu + sched.variance(t) * np.asarray(score))
    return optimal_score(x_t, x0_mean, mu, t, sched)


def ddpm_correspondence_check(sched: DiffusionSchedule, x_prev: float = 1.0, mu: float = 0.0) -> CorrespondenceReport:
    """
    Compare the one-step Euler discretization of the forward SDE with the exact
    transition t-1 -> t. Mean deviations are relative to |x_prev - mu|, variance
    deviations relative to the stationary variance lambda^2.
    """
    offset = x_prev - mu
    scale = abs(offset) if offset != 0 else 1.0
    mean_dev = np.empty(sched.T)
    var_dev = np.empty(sched.T)
    for t in range(1, sched.T + 1):
        theta_prime = sched.bar(t) - sched.bar(t - 1)
        exact_mean = mu + offset * np.exp(-theta_prime)
        euler_mean = x_prev - theta_prime * offset
        exact_var = -sched.lambda2 * np.expm1(-2.0 * theta_prime)
        euler_var = sched.sigma2_at(t) * sched.dt
        mean_dev[t - 1] = abs(exact_mean - euler_mean) / scale
        var_dev[t - 1] = abs(exact_var - euler_var) / sched.lambda2
    worst = int(np.argmax(mean_dev)) + 1
    return CorrespondenceReport(
        T=sched.T,
        max_mean_deviation=float(mean_dev.max()),
        max_variance_deviation=float(var_dev.max()),
        worst_step=worst,
        mean_deviation=mean_dev.tolist(),
        variance_deviation=var_dev.tolist(),
    )
