"""
AdamW with decoupled weight decay and cosine-annealed learning rate
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from app.services.autodiff import ParamStore
from app.utils.exceptions import NumericalException


@dataclass
class OptimizerState:
    lr: float = 5e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: Optional[int] = None
    lr_min: float = 0.0
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        """Cosine annealing from lr to lr_min over total_steps; constant when unset"""
        if not self.total_steps:
            return self.lr
        progress = min(self.step, self.total_steps) / self.total_steps
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + np.cos(np.pi * progress))


def make_optimizer_state(params: ParamStore, **kwargs) -> OptimizerState:
    state = OptimizerState(**kwargs)
    for name, value in params.items():
        # float64 moments keep long runs reproducible and free of underflow
        state.first_moment[name] = np.zeros(value.shape, dtype=np.float64)
        state.second_moment[name] = np.zeros(value.shape, dtype=np.float64)
    return state


def adamw_step(params: ParamStore, state: OptimizerState) -> OptimizerState:
    """
    Apply one AdamW update in place using the gradients stored in ``params``.

    Raises:
        NumericalException: when any gradient is NaN or infinite
    """
    for name in params.names():
        if not np.all(np.isfinite(params.grad(name))):
            raise NumericalException(
                f"Non-finite gradient for parameter {name}",
                error_code="NAN_GRADIENT",
                details={"parameter": name, "step": state.step},
            )

    lr = state.current_lr()
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step

    for name in params.names():
        value = params.value(name)
        grad = params.grad(name).astype(np.float64)
        m = state.first_moment.setdefault(name, np.zeros(value.shape, dtype=np.float64))
        v = state.second_moment.setdefault(name, np.zeros(value.shape, dtype=np.float64))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad

        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * value
        params.set_value(name, value - lr * update)
    return state
