"""
MMSE restorer: FBP reconstruction -> clean image estimate, used as mu
"""

from typing import Optional, Tuple

import numpy as np
import structlog

from app.models.config import NetworkTrainConfig
from app.models.reports import TrainingReport
from app.services import autodiff as ad
from app.services import networks
from app.services.autodiff import ParamStore
from app.services.optim import adamw_step, make_optimizer_state
from app.services.training import check_finite_loss, progress
from app.utils.exceptions import DatasetException, ShapeMismatchException

logger = structlog.get_logger(__name__)


class Restorer:
    """Residual network x + f(x) over the shared block vocabulary, no time input"""

    def __init__(self, params: ParamStore, arch: networks.BlockArchitecture, image_shape: Optional[tuple] = None):
        self.params = params
        self.arch = arch
        self.image_shape = tuple(image_shape) if image_shape else None

    @classmethod
    def create(
        cls, width: int = 16, blocks: int = 2, dropout: float = 0.0, seed: int = 0, image_shape: Optional[tuple] = None
    ) -> "Restorer":
        arch = networks.BlockArchitecture(
            in_channels=1, out_channels=1, width=width, blocks=blocks, dropout=dropout, residual=True
        )
        return cls(networks.init_params(arch, np.random.default_rng(seed)), arch, image_shape)

    @classmethod
    def from_config(cls, cfg: NetworkTrainConfig, image_shape: Optional[tuple] = None) -> "Restorer":
        return cls.create(cfg.width, cfg.blocks, cfg.dropout, cfg.seed, image_shape)

    def meta(self) -> dict:
        return {"kind": "restorer", "arch": self.arch.to_meta(), "image_shape": list(self.image_shape or [])}

    @classmethod
    def from_checkpoint(cls, params: ParamStore, meta: dict) -> "Restorer":
        return cls(params, networks.BlockArchitecture.from_meta(meta["arch"]), meta.get("image_shape") or None)

    def graph(self, images: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None):
        return networks.forward(self.params, self.arch, images[:, None], train=train, rng=rng)


def restore(fbp_img: np.ndarray, model: Restorer) -> np.ndarray:
    """Deterministic inference on [H, W] or [B, H, W]"""
    images = np.asarray(fbp_img, dtype=np.float32)
    single = images.ndim == 2
    if single:
        images = images[None]
    if images.ndim != 3 or (model.image_shape and images.shape[1:] != model.image_shape):
        raise ShapeMismatchException(
            "Restorer input does not match its training shape",
            error_code="SHAPE_MISMATCH",
            details={"expected": list(model.image_shape or []), "actual": list(np.shape(fbp_img))},
        )
    out = model.graph(images).value[:, 0]
    return out[0] if single else out


def train_restorer(
    dataset: Tuple[np.ndarray, np.ndarray],
    model: Restorer,
    cfg: NetworkTrainConfig,
    validation: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[Restorer, TrainingReport]:
    """
    L2 regression of clean images on FBP inputs. Parameters with the lowest
    validation loss (training loss when no validation split is given) are kept.

    Args:
        dataset: paired (fbp, gt) arrays of shape [N, H, W]
    """
    inputs = np.asarray(dataset[0], dtype=np.float32)
    targets = np.asarray(dataset[1], dtype=np.float32)
    if inputs.ndim != 3 or len(inputs) == 0:
        raise DatasetException("Restorer training needs a non-empty [N, H, W] dataset", error_code="EMPTY_DATASET")
    if inputs.shape != targets.shape:
        raise ShapeMismatchException(
            "Inputs and targets differ in shape",
            error_code="SHAPE_MISMATCH",
            details={"inputs": list(inputs.shape), "targets": list(targets.shape)},
        )
    if model.image_shape is None:
        model.image_shape = inputs.shape[1:]

    def evaluate() -> Optional[float]:
        if validation is None or len(validation[0]) == 0:
            return None
        pred = restore(validation[0], model)
        return float(np.mean(np.square(pred.astype(np.float64) - validation[1])))

    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    state = make_optimizer_state(
        model.params, lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=cfg.steps, lr_min=cfg.lr_min
    )
    loss_fn = ad.l2_loss if cfg.loss == "l2" else ad.l1_loss
    losses = []
    initial_val = evaluate()
    best_val = np.inf if initial_val is None else initial_val
    best_step = 0
    best_params = model.params.copy()
    batch = None
    logger.info("restorer_training_started", steps=cfg.steps, items=len(inputs))
    for step in progress(cfg.steps, "restorer"):
        if batch is None or not cfg.fixed_batch:
            idx = rng.integers(0, len(inputs), cfg.batch_size)
            batch = (inputs[idx], targets[idx])
        x, target = batch
        model.params.zero_grad()
        loss = loss_fn(model.graph(x, train=True, rng=drop_rng), target[:, None])
        value = float(loss.value)
        check_finite_loss(value, step, "restorer", losses)
        ad.backward(loss)
        adamw_step(model.params, state)
        losses.append(value)

        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            val = evaluate()
            # Without a validation split the running training loss picks the checkpoint
            score = value if val is None else val
            logger.info("restorer_step", step=step + 1, loss=value, val_loss=val)
            if score < best_val:
                best_val, best_step = score, step + 1
                best_params = model.params.copy()

    model.params.load_from(best_params)
    report = TrainingReport(
        kind="restorer",
        steps=cfg.steps,
        initial_loss=losses[0],
        final_loss=losses[-1],
        best_loss=float(best_val),
        best_step=best_step,
        losses=losses,
        validation={} if initial_val is None else {"initial_mse": initial_val, "best_mse": float(best_val)},
        metadata={"arch": model.arch.to_meta(), "loss": cfg.loss},
    )
    logger.info("restorer_training_finished", final_loss=report.final_loss, best=report.best_loss, best_step=best_step)
    return model, report
