"""
Reverse-mode gradients over a fixed layer vocabulary.

Every differentiable op is registered by name; ``backward`` refuses graphs that
contain anything else and names the offending op.
"""

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.services import numerics
from app.utils.exceptions import (
    InvalidInputException,
    ShapeMismatchException,
    UnsupportedOperationException,
)

SUPPORTED_OPS: Dict[str, str] = {}


def register_op(name: str, description: str):
    SUPPORTED_OPS[name] = description


register_op("const", "constant leaf")
register_op("param", "ParamStore leaf")


class ParamStore:
    """Named trainable arrays, each paired with a gradient of the same shape"""

    def __init__(self):
        self._values: Dict[str, np.ndarray] = {}
        self._grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray):
        if name in self._values:
            raise InvalidInputException(
                f"Duplicate parameter name: {name}", error_code="DUPLICATE_PARAM", details={"name": name}
            )
        value = np.array(value, copy=True)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)

    def _require(self, name: str):
        if name not in self._values:
            raise InvalidInputException(
                f"Unknown parameter: {name}", error_code="UNKNOWN_PARAM", details={"name": name}
            )

    def value(self, name: str) -> np.ndarray:
        self._require(name)
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        self._require(name)
        return self._grads[name]

    def set_value(self, name: str, value: np.ndarray):
        self._require(name)
        value = np.asarray(value, dtype=self._values[name].dtype)
        if value.shape != self._values[name].shape:
            raise ShapeMismatchException(
                f"Shape mismatch for parameter {name}",
                error_code="SHAPE_MISMATCH",
                details={"expected": list(self._values[name].shape), "actual": list(value.shape)},
            )
        self._values[name] = value.copy()

    def accumulate(self, name: str, grad: np.ndarray):
        self._require(name)
        if grad.shape != self._grads[name].shape:
            raise ShapeMismatchException(
                f"Gradient shape mismatch for parameter {name}",
                error_code="SHAPE_MISMATCH",
                details={"expected": list(self._grads[name].shape), "actual": list(grad.shape)},
            )
        self._grads[name] += grad.astype(self._grads[name].dtype, copy=False)

    def zero_grad(self):
        for name in self._grads:
            self._grads[name].fill(0)

    def names(self) -> List[str]:
        return sorted(self._values)

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        for name in self.names():
            yield name, self._values[name]

    def copy(self) -> "ParamStore":
        clone = ParamStore()
        for name, value in self.items():
            clone.add(name, value)
        return clone

    def astype(self, dtype) -> "ParamStore":
        clone = ParamStore()
        for name, value in self.items():
            clone.add(name, value.astype(dtype))
        return clone

    def load_from(self, other: "ParamStore"):
        for name in self.names():
            self.set_value(name, other.value(name))

    @property
    def num_values(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)


class Var:
    """A node of the recorded forward pass"""

    __slots__ = ("value", "parents", "op", "backward_fn", "requires_grad", "store", "param_name")

    def __init__(
        self,
        value: np.ndarray,
        parents: Sequence["Var"] = (),
        op: str = "const",
        backward_fn: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
    ):
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        self.requires_grad = any(p.requires_grad for p in self.parents)
        self.store = None
        self.param_name = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __repr__(self) -> str:
        return f"Var(op={self.op!r}, shape={self.value.shape})"


VarLike = Union[Var, np.ndarray, float]


def constant(value) -> Var:
    return Var(np.asarray(value), op="const")


def parameter(store: ParamStore, name: str) -> Var:
    var = Var(store.value(name), op="param")
    var.requires_grad = True
    var.store = store
    var.param_name = name
    return var


def _lift(x: VarLike) -> Var:
    return x if isinstance(x, Var) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic

register_op("add", "elementwise sum with broadcasting")
register_op("sub", "elementwise difference with broadcasting")
register_op("mul", "elementwise product with broadcasting")
register_op("scale", "product with a constant factor or mask")
register_op("sum", "sum of all entries")


def add(a: VarLike, b: VarLike) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(
        a.value + b.value,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: VarLike, b: VarLike) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(
        a.value - b.value,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: VarLike, b: VarLike) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(
        a.value * b.value,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(x: Var, factor) -> Var:
    factor = np.asarray(factor, dtype=x.value.dtype)
    return Var(x.value * factor, (x,), "scale", lambda g: (_unbroadcast(g * factor, x.shape),))


def total(x: Var) -> Var:
    value = np.asarray(np.sum(x.value, dtype=np.float64))
    return Var(value, (x,), "sum", lambda g: (np.full(x.shape, g, dtype=x.value.dtype),))


# Layers

register_op("conv2d", "same-padded 2-D cross-correlation on [B,C,H,W]")
register_op("affine", "dense map e @ W.T + b on [B,E]")
register_op("scale_shift", "per-channel x * (1 + scale) + shift")
register_op("gate", "split channels in half and multiply the halves")
register_op("mean_pool", "spatial mean over H and W, kept as [B,C,1,1]")
register_op("spectral_filter", "per-frequency gain base * exp(g) along the last axis")
register_op("linear_map", "fixed linear operator with a known adjoint")


def conv2d(x: Var, weight: Var, bias: Optional[Var] = None) -> Var:
    parents = (x, weight) if bias is None else (x, weight, bias)
    value = numerics.conv2d(x.value, weight.value, None if bias is None else bias.value)

    def backward_fn(g):
        grad_x, grad_w, grad_b = numerics.conv2d_backward(x.value, weight.value, g)
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, grad_b

    return Var(value, parents, "conv2d", backward_fn)


def affine(e: Var, weight: Var, bias: Var) -> Var:
    if e.value.ndim != 2 or e.shape[1] != weight.shape[1]:
        raise ShapeMismatchException(
            "Affine input must be [B,E] matching the weight's E",
            error_code="SHAPE_MISMATCH",
            details={"input": list(e.shape), "weight": list(weight.shape)},
        )
    value = e.value @ weight.value.T + bias.value
    return Var(
        value,
        (e, weight, bias),
        "affine",
        lambda g: (g @ weight.value, g.T @ e.value, g.sum(axis=0)),
    )


def scale_shift(x: Var, scale_: Var, shift: Var) -> Var:
    s = scale_.value[:, :, None, None]
    h = shift.value[:, :, None, None]
    return Var(
        x.value * (1.0 + s) + h,
        (x, scale_, shift),
        "scale_shift",
        lambda g: (g * (1.0 + s), (g * x.value).sum(axis=(2, 3)), g.sum(axis=(2, 3))),
    )


def gate(x: Var) -> Var:
    channels = x.shape[1]
    if channels % 2:
        raise ShapeMismatchException(
            "Gate needs an even channel count", error_code="SHAPE_MISMATCH", details={"shape": list(x.shape)}
        )
    half = channels // 2
    a, b = x.value[:, :half], x.value[:, half:]
    return Var(a * b, (x,), "gate", lambda g: (np.concatenate([g * b, g * a], axis=1),))


def mean_pool(x: Var) -> Var:
    area = x.shape[2] * x.shape[3]
    value = x.value.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.value.dtype)
    return Var(value, (x,), "mean_pool", lambda g: (np.broadcast_to(g / area, x.shape).copy(),))


def spectral_filter(p: Var, log_gain: Var, base: np.ndarray, n_fft: int) -> Var:
    """
    Filter rows of ``p`` (last axis, length D) by ``base * exp(log_gain)`` on the
    rfft grid of the zero-padded length ``n_fft``.
    """
    width = p.shape[-1]
    gain = base * np.exp(log_gain.value.astype(np.float64))
    spectrum = np.fft.rfft(p.value.astype(np.float64), n=n_fft, axis=-1)
    value = np.fft.irfft(spectrum * gain, n=n_fft, axis=-1)[..., :width].astype(p.value.dtype)

    # Hermitian weights: interior rfft bins stand for two full-spectrum bins
    weights = np.full(gain.shape, 2.0)
    weights[0] = 1.0
    if n_fft % 2 == 0:
        weights[-1] = 1.0

    def backward_fn(g):
        g_spec = np.fft.rfft(np.asarray(g, dtype=np.float64), n=n_fft, axis=-1)
        grad_p = np.fft.irfft(g_spec * gain, n=n_fft, axis=-1)[..., :width].astype(p.value.dtype)
        cross = np.real(spectrum * np.conj(g_spec)).reshape(-1, gain.size).sum(axis=0)
        grad_gain = weights / n_fft * cross
        return grad_p, (grad_gain * gain).astype(log_gain.value.dtype)

    return Var(value, (p, log_gain), "spectral_filter", backward_fn)


def linear_map(
    x: Var, forward: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray]
) -> Var:
    return Var(forward(x.value), (x,), "linear_map", lambda g: (adjoint(g),))


# Losses

register_op("l1_loss", "mean absolute difference")
register_op("l2_loss", "mean squared difference")


def l1_loss(a: VarLike, b: VarLike) -> Var:
    a, b = _lift(a), _lift(b)
    diff = a.value - b.value
    n = diff.size
    value = np.asarray(np.mean(np.abs(diff), dtype=np.float64))

    def backward_fn(g):
        grad = (np.sign(diff) * (g / n)).astype(diff.dtype)
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return Var(value, (a, b), "l1_loss", backward_fn)


def l2_loss(a: VarLike, b: VarLike) -> Var:
    a, b = _lift(a), _lift(b)
    diff = a.value - b.value
    n = diff.size
    value = np.asarray(np.mean(np.square(diff, dtype=np.float64)))

    def backward_fn(g):
        grad = (diff * (2.0 * g / n)).astype(diff.dtype)
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return Var(value, (a, b), "l2_loss", backward_fn)


def _topological(root: Var) -> List[Var]:
    order: List[Var] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Var):
    """
    Propagate d(loss)/d(node) through the recorded graph and add the result to
    the gradients of every ParamStore leaf. Gradients accumulate; call
    ``ParamStore.zero_grad`` between steps.
    """
    if np.size(loss.value) != 1:
        raise InvalidInputException(
            "backward needs a scalar loss", error_code="NON_SCALAR_LOSS", details={"shape": list(loss.shape)}
        )
    order = _topological(loss)
    for node in order:
        if node.op not in SUPPORTED_OPS:
            raise UnsupportedOperationException(
                f"Operation '{node.op}' is not differentiable here",
                error_code="UNSUPPORTED_OP",
                details={"op": node.op, "supported": sorted(SUPPORTED_OPS)},
            )

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.op == "param":
            node.store.accumulate(node.param_name, np.asarray(g).reshape(node.shape))
            continue
        if node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def check_gradients(
    loss_fn: Callable[[], Var],
    store: ParamStore,
    eps: float = 1e-6,
    max_entries: int = 24,
    seed: int = 0,
) -> Dict[str, float]:
    """
    Compare analytic gradients with central finite differences.

    Args:
        loss_fn: rebuilds the graph from ``store`` and returns the scalar loss
        store: parameters to probe (use float64 values for tight tolerances)
        eps: finite-difference step
        max_entries: entries probed per parameter, chosen at random beyond this size
        seed: selects the probed entries

    Returns:
        Relative error per parameter name, ||analytic - numeric|| / max(||analytic||, ||numeric||)
    """
    rng = np.random.default_rng(seed)
    store.zero_grad()
    backward(loss_fn())
    errors: Dict[str, float] = {}
    for name in store.names():
        value = store.value(name)
        analytic = store.grad(name).copy()
        flat = np.arange(value.size)
        if value.size > max_entries:
            flat = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        numeric = np.empty(flat.size)
        for k, index in enumerate(flat):
            original = value.flat[index]
            value.flat[index] = original + eps
            plus = float(loss_fn().value)
            value.flat[index] = original - eps
            minus = float(loss_fn().value)
            value.flat[index] = original
            numeric[k] = (plus - minus) / (2 * eps)
        picked = analytic.reshape(-1)[flat]
        scale_ = max(np.linalg.norm(picked), np.linalg.norm(numeric), 1e-12)
        errors[name] = float(np.linalg.norm(picked - numeric) / scale_)
    store.zero_grad()
    return errors
