"""
Score functions s(x_t, mu, t): the analytic Gaussian oracle, the optimal-score
oracle for a known x0, and the trainable time-conditioned denoiser.
"""

from dataclasses import dataclass
from typing import ClassVar, Literal, Optional, Protocol, Tuple, Union

import numpy as np
import structlog

from app.models.config import NetworkTrainConfig
from app.models.reports import TrainingReport
from app.services import autodiff as ad
from app.services import networks
from app.services.autodiff import ParamStore, Var
from app.services.mrsde import DiffusionSchedule, make_schedule, optimal_score
from app.services.optim import adamw_step, make_optimizer_state
from app.services.training import check_finite_loss, progress
from app.utils.exceptions import DatasetException, InvalidInputException, ShapeMismatchException

logger = structlog.get_logger(__name__)


ScoreForm = Literal["marginal", "optimal"]


class ScoreFunction(Protocol):
    """
    s(x_t, mu, t). ``form`` says which score is returned: "marginal" for the
    score of p(x_t) (what denoising score matching learns), "optimal" for the
    posterior-mean score of ``mrsde.optimal_score``. Objects without ``form``
    are treated as marginal.
    """

    form: ScoreForm

    def evaluate(self, x_t: np.ndarray, mu: np.ndarray, t: int) -> np.ndarray:
        ...


def time_embedding(t: Union[int, np.ndarray], dim: int) -> np.ndarray:
    """
    Sinusoidal embedding [sin(t w_i), cos(t w_i)] with w_i = 10000^(-i / (dim / 2)).

    A scalar ``t`` gives a [dim] vector, an array of steps gives [len(t), dim].
    """
    if dim < 2 or dim % 2:
        raise InvalidInputException(
            "Time embedding dimension must be a positive even number",
            error_code="ODD_EMBEDDING",
            details={"dim": dim},
        )
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


@dataclass
class GaussianOracle:
    """Exact score for a diagonal Gaussian prior x0 ~ N(m0, diag(var0))"""

    sched: DiffusionSchedule
    m0: np.ndarray
    var0: np.ndarray
    form: ClassVar[ScoreForm] = "marginal"

    def __post_init__(self):
        self.m0 = np.asarray(self.m0, dtype=np.float64)
        self.var0 = np.asarray(self.var0, dtype=np.float64)
        if np.any(self.var0 < 0):
            raise InvalidInputException("Prior variances must be non-negative", error_code="INVALID_PRIOR")

    def marginal(self, mu, t: int) -> Tuple[np.ndarray, np.ndarray]:
        self.sched.check_step(t)
        decay = np.exp(-self.sched.bar(t))
        mean = mu + (self.m0 - mu) * decay
        variance = decay * decay * self.var0 + self.sched.variance(t)
        return mean, variance

    def evaluate(self, x_t, mu, t: int) -> np.ndarray:
        return oracle_score(x_t, mu, t, self.sched, self)


def oracle_score(x_t, mu, t: int, sched: DiffusionSchedule, oracle: GaussianOracle) -> np.ndarray:
    """Score of N(mu + (m0 - mu) e^{-bar_t}, e^{-2 bar_t} var0 + v_t) at x_t"""
    if oracle.sched is not sched:
        oracle = GaussianOracle(sched, oracle.m0, oracle.var0)
    mean, variance = oracle.marginal(mu, t)
    if np.any(variance <= 0):
        raise InvalidInputException(
            "Marginal variance is zero; the score is undefined",
            error_code="ZERO_VARIANCE",
            details={"t": int(t)},
        )
    return -(np.asarray(x_t, dtype=np.float64) - mean) / variance


@dataclass
class OptimalScoreOracle:
    """Score whose reverse step lands on the posterior mean for a known x0"""

    sched: DiffusionSchedule
    x0: np.ndarray
    form: ClassVar[ScoreForm] = "optimal"

    def evaluate(self, x_t, mu, t: int) -> np.ndarray:
        return optimal_score(x_t, self.x0, mu, t, self.sched)


def _as_batch(x_t, mu) -> Tuple[np.ndarray, np.ndarray, bool]:
    x = np.asarray(x_t, dtype=np.float32)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeMismatchException(
            "Denoiser input must be [H, W] or [B, H, W]", error_code="SHAPE_MISMATCH", details={"shape": list(x.shape)}
        )
    m = np.asarray(mu, dtype=np.float32)
    try:
        m = np.broadcast_to(m, x.shape)
    except ValueError:
        raise ShapeMismatchException(
            "x_t and mu must have the same shape",
            error_code="SHAPE_MISMATCH",
            details={"x_t": list(np.shape(x_t)), "mu": list(np.shape(mu))},
        )
    return x, m, single


class CondDenoiser:
    """
    Noise-predicting network eps(x_t, mu, t). Input is the channel stack
    [x_t, mu]; the time embedding drives scale-shift at the first and last block.
    The score is -eps / sqrt(v_t).
    """

    form: ScoreForm = "marginal"

    def __init__(self, params: ParamStore, arch: networks.BlockArchitecture, sched: DiffusionSchedule):
        if not arch.emb_dim:
            raise InvalidInputException("CondDenoiser needs a time-conditioned architecture", error_code="INVALID_ARCH")
        self.params = params
        self.arch = arch
        self.sched = sched

    @classmethod
    def create(
        cls,
        sched: DiffusionSchedule,
        width: int = 32,
        blocks: int = 4,
        emb_dim: int = 32,
        dropout: float = 0.1,
        seed: int = 0,
    ) -> "CondDenoiser":
        arch = networks.BlockArchitecture(
            in_channels=2, out_channels=1, width=width, blocks=blocks, emb_dim=emb_dim, dropout=dropout
        )
        return cls(networks.init_params(arch, np.random.default_rng(seed)), arch, sched)

    @classmethod
    def from_config(cls, sched: DiffusionSchedule, cfg: NetworkTrainConfig) -> "CondDenoiser":
        return cls.create(sched, cfg.width, cfg.blocks, cfg.emb_dim, cfg.dropout, cfg.seed)

    def meta(self) -> dict:
        return {"kind": "score", "arch": self.arch.to_meta(), "schedule": self.sched.to_report()}

    @classmethod
    def from_checkpoint(cls, params: ParamStore, meta: dict) -> "CondDenoiser":
        schedule = meta["schedule"]
        sched = make_schedule(schedule["T"], schedule["lambda2"], schedule["kind"])
        return cls(params, networks.BlockArchitecture.from_meta(meta["arch"]), sched)

    def predict_noise(
        self, x_t, mu, t, train: bool = False, rng: Optional[np.random.Generator] = None
    ) -> Var:
        x, m, _ = _as_batch(x_t, mu)
        steps = np.broadcast_to(np.asarray(t), (x.shape[0],))
        emb = time_embedding(steps, self.arch.emb_dim).astype(np.float32)
        stacked = np.stack([x, m], axis=1)
        return networks.forward(self.params, self.arch, stacked, emb, train=train, rng=rng)

    def evaluate(self, x_t, mu, t: int) -> np.ndarray:
        if t < 1:
            raise InvalidInputException(
                "Score is undefined at t = 0 (zero variance)", error_code="ZERO_VARIANCE", details={"t": int(t)}
            )
        self.sched.check_step(t)
        _, _, single = _as_batch(x_t, mu)
        eps = self.predict_noise(x_t, mu, t).value[:, 0]
        score = -eps / np.sqrt(self.sched.variance(t))
        return score[0] if single else score


def denoiser_forward(x_t, mu, t: int, model: CondDenoiser) -> np.ndarray:
    return model.evaluate(x_t, mu, t)


def train_score(
    dataset: Tuple[np.ndarray, np.ndarray],
    sched: DiffusionSchedule,
    model: CondDenoiser,
    cfg: NetworkTrainConfig,
) -> Tuple[CondDenoiser, TrainingReport]:
    """
    Fit the denoiser to the noise of x_t ~ q(x_t | x0, mu) with t uniform on
    {1..T}. Predicting eps is the conditional-score target scaled by -sqrt(v_t).

    Args:
        dataset: paired (x0, mu) arrays of shape [N, H, W]
    """
    x0_all = np.asarray(dataset[0], dtype=np.float32)
    mu_all = np.asarray(dataset[1], dtype=np.float32)
    if x0_all.ndim != 3 or len(x0_all) == 0:
        raise DatasetException("Score training needs a non-empty [N, H, W] dataset", error_code="EMPTY_DATASET")
    if mu_all.shape != x0_all.shape:
        raise ShapeMismatchException(
            "x0 and mu datasets differ in shape",
            error_code="SHAPE_MISMATCH",
            details={"x0": list(x0_all.shape), "mu": list(mu_all.shape)},
        )
    if (model.sched.T, model.sched.lambda2, model.sched.kind) != (sched.T, sched.lambda2, sched.kind):
        raise InvalidInputException("Model schedule differs from the training schedule", error_code="SCHEDULE_MISMATCH")

    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    params = model.params
    state = make_optimizer_state(
        params, lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=cfg.steps, lr_min=cfg.lr_min
    )
    variances = np.array([sched.variance(t) for t in range(sched.T + 1)])
    decays = np.exp(-np.asarray(sched.theta_bar))

    loss_fn = ad.l2_loss if cfg.loss == "l2" else ad.l1_loss
    losses = []
    batch = None
    best_loss, best_step = np.inf, 0
    logger.info("score_training_started", steps=cfg.steps, items=len(x0_all), T=sched.T, lambda2=sched.lambda2)
    for step in progress(cfg.steps, "score"):
        if batch is None or not cfg.fixed_batch:
            idx = rng.integers(0, len(x0_all), cfg.batch_size)
            t = rng.integers(1, sched.T + 1, cfg.batch_size)
            eps = rng.standard_normal((cfg.batch_size,) + x0_all.shape[1:]).astype(np.float32)
            x0, mu = x0_all[idx], mu_all[idx]
            decay = decays[t][:, None, None]
            std = np.sqrt(variances[t])[:, None, None]
            x_t = (mu + (x0 - mu) * decay + std * eps).astype(np.float32)
            batch = (x_t, mu, t, eps)
        x_t, mu, t, eps = batch

        params.zero_grad()
        pred = model.predict_noise(x_t, mu, t, train=True, rng=drop_rng)
        loss = loss_fn(pred, eps[:, None])
        value = float(loss.value)
        check_finite_loss(value, step, "score", losses)
        ad.backward(loss)
        adamw_step(params, state)
        losses.append(value)
        if value < best_loss:
            best_loss, best_step = value, step
        if (step + 1) % cfg.eval_every == 0:
            logger.info("score_step", step=step + 1, loss=value, lr=state.current_lr())

    report = TrainingReport(
        kind="score",
        steps=cfg.steps,
        initial_loss=losses[0],
        final_loss=losses[-1],
        best_loss=float(best_loss),
        best_step=best_step,
        losses=losses,
        metadata={"schedule": sched.to_report(), "arch": model.arch.to_meta(), "loss": cfg.loss},
    )
    logger.info("score_training_finished", final_loss=report.final_loss, best_loss=report.best_loss)
    return model, report
