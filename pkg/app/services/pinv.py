"""
Learnable Radon pseudo-inverse: per-frequency gains on the ramp filter,
back-projection, learned data-consistency refinement and a bias-free residual
post-processor. Also the exact masking operator used as a Moore-Penrose
reference, the range/null projectors and range-space rectification.
"""

from dataclasses import dataclass, field
from typing import Optional, Protocol, Tuple, Union

import numpy as np
import structlog

from app.models.config import PinvTrainConfig
from app.models.geometry import Geometry, Sinogram
from app.models.reports import TrainingReport
from app.services import autodiff as ad
from app.services import networks
from app.services.autodiff import ParamStore, Var
from app.services.optim import adamw_step, make_optimizer_state
from app.services.tomography import operator_for, ramp_response
from app.services.training import check_finite_loss, progress
from app.utils.exceptions import DatasetException, InvalidInputException

logger = structlog.get_logger(__name__)

Measurement = Union[np.ndarray, Sinogram]

# eta_k = REFINE_SCALE * (k + 1) * refine.step{k}
REFINE_SCALE = 40.0


def _refine_factor(k: int) -> float:
    return REFINE_SCALE * (k + 1)


class PseudoInverse(Protocol):
    """A forward operator A paired with an approximate inverse A+, both batch-aware"""

    geometry: Optional[Geometry]
    params: ParamStore

    def forward(self, x: np.ndarray) -> np.ndarray:
        ...

    def pseudo_inverse(self, y: np.ndarray) -> np.ndarray:
        ...

    def linear_pseudo_inverse(self, y: np.ndarray) -> np.ndarray:
        ...

    def measure_graph(self, x: Var) -> Var:
        ...

    def inverse_graph(self, y: Var) -> Var:
        ...


@dataclass
class MaskOperator:
    """
    Pixel-subsampling operator A x = x[mask] with its exact pseudo-inverse,
    the zero-filling embedding A+ y.
    """

    mask: np.ndarray
    geometry: Optional[Geometry] = None
    params: ParamStore = field(default_factory=ParamStore)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise InvalidInputException("Mask must be 2-D", error_code="INVALID_MASK")

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.mask]

    def pseudo_inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y)
        out = np.zeros(y.shape[:-1] + self.mask.shape, dtype=y.dtype)
        out[..., self.mask] = y
        return out

    def linear_pseudo_inverse(self, y: np.ndarray) -> np.ndarray:
        return self.pseudo_inverse(y)

    def measure_graph(self, x: Var) -> Var:
        return ad.linear_map(x, lambda v: self.forward(v[:, 0]), lambda g: self.pseudo_inverse(g)[:, None])

    def inverse_graph(self, y: Var) -> Var:
        return ad.linear_map(y, lambda v: self.pseudo_inverse(v)[:, None], lambda g: self.forward(g[:, 0]))


def postproc_architecture(width: int, blocks: int) -> networks.BlockArchitecture:
    return networks.BlockArchitecture(
        in_channels=1,
        out_channels=1,
        width=width,
        blocks=blocks,
        bias=False,
        attention=False,
        residual=True,
        zero_tail=True,
    )


class LearnablePinv:
    """
    y -> postproc(R(y)) with the learned filtered back-projection

        L y = scale * A^T F^{-1}[ |w| exp(g) F[y] ]

    and the refinement R: x_0 = L y, x_{k+1} = x_k + eta_k L (y - A x_k).
    Back-projecting a limited-angle sinogram spreads streaks past the
    reconstruction circle where A cannot see them, so L alone reprojects
    badly; the refinement steps pull A x back onto y.

    With g = 0, every eta_k = 0 and a zero-initialized post-processor tail the
    map is exactly filtered back-projection. The post-processor has no bias
    terms and R is linear, so a zero sinogram maps to a zero image.
    """

    def __init__(
        self,
        geometry: Geometry,
        params: ParamStore,
        arch: Optional[networks.BlockArchitecture],
        linear_only: bool = False,
    ):
        self.geometry = geometry
        self.params = params
        self.arch = arch
        self.linear_only = linear_only or arch is None or arch.blocks == 0
        self.operator = operator_for(geometry)
        self.response, self.n_fft = ramp_response(geometry.num_detectors)
        if params.value("filter.log_gain").shape != self.response.shape:
            raise InvalidInputException(
                "Filter gains do not match the detector count",
                error_code="FILTER_SHAPE",
                details={"expected": list(self.response.shape), "actual": list(params.value("filter.log_gain").shape)},
            )
        self.refine_names = sorted(
            (name for name in params.names() if name.startswith("refine.step")), key=lambda name: int(name[11:])
        )

    @classmethod
    def create(
        cls, geometry: Geometry, width: int = 16, blocks: int = 3, seed: int = 0, refine_steps: int = 0
    ) -> "LearnablePinv":
        if refine_steps < 0:
            raise InvalidInputException(
                "refine_steps must be non-negative", error_code="INVALID_ARCH", details={"refine_steps": refine_steps}
            )
        response, _ = ramp_response(geometry.num_detectors)
        arch = postproc_architecture(width, blocks) if blocks else None
        params = (
            networks.init_params(arch, np.random.default_rng(seed), prefix="post.") if arch else ParamStore()
        )
        params.add("filter.log_gain", np.zeros(response.shape, dtype=np.float32))
        for k in range(refine_steps):
            params.add(f"refine.step{k}", np.zeros(1, dtype=np.float32))
        return cls(geometry, params, arch)

    @classmethod
    def from_config(cls, geometry: Geometry, cfg: PinvTrainConfig) -> "LearnablePinv":
        return cls.create(geometry, cfg.width, cfg.blocks, cfg.seed, cfg.refine_steps)

    def meta(self) -> dict:
        return {
            "kind": "pinv",
            "geometry": self.geometry.tag(),
            "arch": self.arch.to_meta() if self.arch else None,
            "refine_steps": len(self.refine_names),
        }

    @classmethod
    def from_checkpoint(cls, params: ParamStore, meta: dict, geometry: Optional[Geometry] = None) -> "LearnablePinv":
        stored = Geometry.from_tag(meta["geometry"])
        if geometry is not None:
            geometry.require_same(stored, "pseudo-inverse checkpoint")
        arch = networks.BlockArchitecture.from_meta(meta["arch"]) if meta.get("arch") else None
        return cls(stored, params, arch)

    def gains(self) -> np.ndarray:
        return self.response * np.exp(self.params.value("filter.log_gain").astype(np.float64))

    def refine_steps(self) -> np.ndarray:
        return np.array(
            [_refine_factor(k) * float(self.params.value(name)[0]) for k, name in enumerate(self.refine_names)]
        )

    def measure_graph(self, x: Var) -> Var:
        return ad.linear_map(
            x, lambda v: self.operator.project(v[:, 0]), lambda g: self.operator.adjoint(g)[:, None]
        )

    def _backproject_graph(self, y: Var) -> Var:
        scale_ = self.operator.fbp_scale
        filtered = ad.spectral_filter(y, ad.parameter(self.params, "filter.log_gain"), self.response, self.n_fft)
        return ad.linear_map(
            filtered,
            lambda v: (self.operator.adjoint(v) * scale_)[:, None],
            lambda g: self.operator.project(g[:, 0]) * scale_,
        )

    def inverse_graph(self, y: Var, linear_only: Optional[bool] = None) -> Var:
        """[B, A, D] sinograms to [B, 1, H, W] images"""
        image = self._backproject_graph(y)
        for k, name in enumerate(self.refine_names):
            residual = ad.sub(y, self.measure_graph(image))
            eta = ad.scale(ad.parameter(self.params, name), _refine_factor(k))
            image = ad.add(image, ad.mul(self._backproject_graph(residual), eta))
        use_linear = self.linear_only if linear_only is None else linear_only
        if use_linear or self.arch is None:
            return image
        return networks.forward(self.params, self.arch, image, prefix="post.")

    def pseudo_inverse(self, y: np.ndarray, linear_only: Optional[bool] = None) -> np.ndarray:
        y = np.asarray(y)
        single = y.ndim == 2
        batch = y[None] if single else y.reshape((-1,) + y.shape[-2:])
        out = self.inverse_graph(ad.constant(batch), linear_only).value[:, 0]
        return out[0] if single else out.reshape(y.shape[:-2] + out.shape[-2:])

    def linear_pseudo_inverse(self, y: np.ndarray) -> np.ndarray:
        """Learned filtered back-projection and refinement, without the post-processor"""
        return self.pseudo_inverse(y, linear_only=True)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.operator.project(x)


def _values(y: Measurement, model: PseudoInverse) -> np.ndarray:
    if isinstance(y, Sinogram):
        if model.geometry is not None:
            model.geometry.require_same(y.geometry, "sinogram")
        return y.values
    return np.asarray(y)


def pinv_apply(sino: Sinogram, model: LearnablePinv, linear_only: Optional[bool] = None) -> np.ndarray:
    """
    Raises:
        GeometryMismatchException: when the sinogram was taken with another geometry
    """
    return model.pseudo_inverse(_values(sino, model), linear_only)


def pinv_loss(
    x0: np.ndarray, model: PseudoInverse, alpha: float, backward: bool = True
) -> Tuple[float, float, float]:
    """
    (1 - alpha) * mean|A x - A A+ A x| + alpha * mean|A+ y - A+ A A+ y| with y = A x.

    Returns:
        (loss, l1, l2); l2 is 0.0 (not evaluated) when alpha == 0
    """
    x0 = np.asarray(x0)
    if x0.ndim != 3 or len(x0) == 0:
        raise DatasetException("pinv_loss needs a non-empty [B, H, W] batch", error_code="EMPTY_BATCH")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputException("alpha must lie in [0, 1]", error_code="INVALID_ALPHA", details={"alpha": alpha})

    loss, l1, l2 = _loss_graph(x0, model, alpha)
    if backward:
        ad.backward(loss)
    return float(loss.value), float(l1.value), 0.0 if l2 is None else float(l2.value)


def _loss_graph(x0: np.ndarray, model: PseudoInverse, alpha: float) -> Tuple[Var, Var, Optional[Var]]:
    y = ad.constant(model.forward(x0))
    recon = model.inverse_graph(y)
    reproj = model.measure_graph(recon)
    l1 = ad.l1_loss(reproj, y)
    if alpha == 0.0:
        return l1, l1, None
    again = model.inverse_graph(reproj)
    l2 = ad.l1_loss(again, recon)
    return ad.add(ad.scale(l1, 1.0 - alpha), ad.scale(l2, alpha)), l1, l2


def relative_range_error(x: np.ndarray, model: PseudoInverse) -> float:
    """sum|A x - A A+ A x| / sum|A x|"""
    measured = model.forward(np.asarray(x))
    again = model.forward(model.pseudo_inverse(measured))
    denominator = float(np.sum(np.abs(measured), dtype=np.float64))
    if denominator == 0.0:
        return 0.0
    return float(np.sum(np.abs(measured - again), dtype=np.float64)) / denominator


def _check_geometry(model: PseudoInverse, geom: Optional[Geometry]):
    if geom is not None and model.geometry is not None:
        model.geometry.require_same(geom, "pseudo-inverse")


def range_project(x: np.ndarray, pinv: PseudoInverse, geom: Optional[Geometry] = None) -> np.ndarray:
    """A+ A x, in float64"""
    _check_geometry(pinv, geom)
    return np.asarray(pinv.pseudo_inverse(pinv.forward(x)), dtype=np.float64)


def null_project(x: np.ndarray, pinv: PseudoInverse, geom: Optional[Geometry] = None) -> np.ndarray:
    """x - A+ A x, in float64"""
    return np.asarray(x, dtype=np.float64) - range_project(x, pinv, geom)


def rectify(x0t: np.ndarray, y: Measurement, pinv: PseudoInverse, gamma: float) -> np.ndarray:
    """
    x0t - gamma * A+ (A x0t - y). At gamma = 1 this equals A+ y + (I - A+ A) x0t.

    The residual goes through the linear part of A+ only. The post-processor
    is trained on sinograms of phantoms, and early x0 estimates produce
    residuals far outside that range where its gated products grow
    quadratically.
    """
    if gamma < 0:
        raise InvalidInputException("gamma must be non-negative", error_code="INVALID_GAMMA", details={"gamma": gamma})
    values = _values(y, pinv)
    x0t = np.asarray(x0t)
    if gamma == 0:
        return x0t.copy()
    correction = pinv.linear_pseudo_inverse(pinv.forward(x0t) - values)
    return (x0t - gamma * correction).astype(np.result_type(x0t.dtype, np.float32), copy=False)


def train_pinv(
    images: np.ndarray,
    model: LearnablePinv,
    cfg: PinvTrainConfig,
    validation: Optional[np.ndarray] = None,
) -> Tuple[LearnablePinv, TrainingReport]:
    """
    Two phases: pure range loss (alpha = 0), then alpha = cfg.alpha_pinv. The
    parameters with the best validation l1 are restored at the end.

    Raises:
        DivergenceException: on a NaN or infinite loss, with the recent history
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3 or len(images) == 0:
        raise DatasetException(
            "Pseudo-inverse training needs a non-empty [N, H, W] dataset", error_code="EMPTY_DATASET"
        )
    model.geometry.require_image(images)
    held_out = images if validation is None or len(validation) == 0 else np.asarray(validation, dtype=np.float32)

    rng = np.random.default_rng(cfg.seed)
    total = cfg.steps_phase1 + cfg.steps_phase2
    state = make_optimizer_state(
        model.params, lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=max(total, 1), lr_min=cfg.lr_min
    )
    phases = [(cfg.alpha_schedule[0], cfg.steps_phase1), (cfg.alpha_schedule[1], cfg.steps_phase2)]

    def validation_l1() -> float:
        return pinv_loss(held_out, model, 0.0, backward=False)[1]

    initial_val = validation_l1()
    best_val, best_step = initial_val, 0
    best_params = model.params.copy()
    losses, l1_curve, l2_curve = [], [], []
    logger.info("pinv_training_started", steps=total, items=len(images), geometry=model.geometry.tag())

    step = 0
    for phase, (alpha, steps) in enumerate(phases, start=1):
        for _ in progress(steps, f"pinv phase {phase}"):
            batch = images[rng.integers(0, len(images), cfg.batch_size)]
            model.params.zero_grad()
            loss_var, l1_var, l2_var = _loss_graph(batch, model, alpha)
            loss = float(loss_var.value)
            l1 = float(l1_var.value)
            l2 = 0.0 if l2_var is None else float(l2_var.value)
            check_finite_loss(loss, step, "pinv", losses, phase=phase)
            ad.backward(loss_var)
            adamw_step(model.params, state)
            losses.append(loss)
            l1_curve.append(l1)
            l2_curve.append(l2)
            step += 1
            if step % cfg.eval_every == 0 or step == total:
                val = validation_l1()
                logger.info("pinv_step", step=step, phase=phase, alpha=alpha, loss=loss, l1=l1, val_l1=val)
                if val < best_val:
                    best_val, best_step = val, step
                    best_params = model.params.copy()

    model.params.load_from(best_params)
    rel = relative_range_error(held_out, model)
    report = TrainingReport(
        kind="pinv",
        steps=total,
        initial_loss=initial_val,
        final_loss=losses[-1] if losses else initial_val,
        best_loss=best_val,
        best_step=best_step,
        losses=losses,
        alpha_schedule=cfg.alpha_schedule,
        validation={"initial_l1": initial_val, "best_l1": best_val, "relative_range_error": rel},
        metadata={"geometry": model.geometry.tag(), "l1": l1_curve, "l2": l2_curve},
    )
    logger.info("pinv_training_finished", best_l1=best_val, best_step=best_step, relative_range_error=rel)
    return model, report

