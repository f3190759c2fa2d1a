"""
Residual conv-block networks shared by the denoiser, the restorer and the
pseudo-inverse post-processor.

Block layout: [scale-shift] -> conv3x3 (w -> 2w) -> gate -> [channel attention]
-> conv3x3 (w -> w) -> residual add.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Union

import numpy as np

from app.services import autodiff as ad
from app.services.autodiff import ParamStore, Var
from app.utils.exceptions import ShapeMismatchException


@dataclass(frozen=True)
class BlockArchitecture:
    in_channels: int
    out_channels: int
    width: int
    blocks: int
    kernel_size: int = 3
    bias: bool = True
    attention: bool = True
    emb_dim: int = 0  # 0 disables time conditioning
    dropout: float = 0.0
    residual: bool = False  # add the first out_channels input channels to the output
    zero_tail: bool = False  # zero-initialized ending conv, so the net starts as identity (with residual)

    def to_meta(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_meta(cls, meta: Dict[str, Any]) -> "BlockArchitecture":
        return cls(**meta)

    def injection_sites(self):
        if not self.emb_dim:
            return ()
        return tuple(sorted({0, self.blocks - 1}))


def init_params(arch: BlockArchitecture, rng: np.random.Generator, prefix: str = "") -> ParamStore:
    """He-style initialization; the second conv of each block starts small so blocks begin near identity"""
    store = ParamStore()
    k = arch.kernel_size

    def conv(name: str, cout: int, cin: int, size: int, gain: float = 1.0, zero: bool = False, bias_value=0.0):
        std = gain * np.sqrt(2.0 / (cin * size * size))
        weight = np.zeros((cout, cin, size, size)) if zero else rng.normal(0.0, std, (cout, cin, size, size))
        store.add(f"{prefix}{name}.weight", weight.astype(np.float32))
        if arch.bias:
            store.add(f"{prefix}{name}.bias", np.full(cout, bias_value, dtype=np.float32))

    conv("intro", arch.width, arch.in_channels, k)
    for i in range(arch.blocks):
        if i in arch.injection_sites():
            for part in ("scale", "shift"):
                weight = rng.normal(0.0, 0.5 / np.sqrt(arch.emb_dim), (arch.width, arch.emb_dim))
                store.add(f"{prefix}block{i}.{part}.weight", weight.astype(np.float32))
                store.add(f"{prefix}block{i}.{part}.bias", np.zeros(arch.width, dtype=np.float32))
        conv(f"block{i}.conv1", 2 * arch.width, arch.width, k)
        if arch.attention:
            conv(f"block{i}.attn", arch.width, arch.width, 1, gain=0.1, bias_value=1.0)
        conv(f"block{i}.conv2", arch.width, arch.width, k, gain=0.2)
    conv("ending", arch.out_channels, arch.width, k, gain=0.5, zero=arch.zero_tail)
    return store


def _dropout(h: Var, rate: float, rng: Optional[np.random.Generator]) -> Var:
    if not rate or rng is None:
        return h
    keep = (rng.random(h.shape) >= rate).astype(h.value.dtype) / (1.0 - rate)
    return ad.scale(h, keep)


def forward(
    params: ParamStore,
    arch: BlockArchitecture,
    x: Union[np.ndarray, Var],
    emb: Optional[Union[np.ndarray, Var]] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    prefix: str = "",
) -> Var:
    """
    Run the network on a [B, C, H, W] batch.

    Args:
        x: input batch (array or graph node)
        emb: [B, emb_dim] time embedding; required iff the architecture is time-conditioned
        train: enables dropout in the in and out stages (needs ``rng``)

    Returns:
        [B, out_channels, H, W] graph node
    """
    inp = x if isinstance(x, Var) else ad.constant(x)
    if inp.value.ndim != 4 or inp.shape[1] != arch.in_channels:
        raise ShapeMismatchException(
            f"Network expects [B, {arch.in_channels}, H, W]",
            error_code="SHAPE_MISMATCH",
            details={"shape": list(inp.shape)},
        )
    if arch.emb_dim:
        if emb is None:
            raise ShapeMismatchException("Time-conditioned network needs an embedding", error_code="MISSING_EMBEDDING")
        emb_var = emb if isinstance(emb, Var) else ad.constant(np.asarray(emb, dtype=inp.value.dtype))
        if emb_var.value.ndim != 2 or emb_var.shape != (inp.shape[0], arch.emb_dim):
            raise ShapeMismatchException(
                "Embedding dimension mismatch",
                error_code="EMBEDDING_MISMATCH",
                details={"expected": [inp.shape[0], arch.emb_dim], "actual": list(emb_var.shape)},
            )

    def p(name: str) -> Optional[Var]:
        full = f"{prefix}{name}"
        return ad.parameter(params, full) if full in params else None

    rate = arch.dropout if train else 0.0

    h = ad.conv2d(inp, p("intro.weight"), p("intro.bias"))
    h = _dropout(h, rate, rng)
    for i in range(arch.blocks):
        u = h
        if i in arch.injection_sites():
            scale_ = ad.affine(emb_var, p(f"block{i}.scale.weight"), p(f"block{i}.scale.bias"))
            shift = ad.affine(emb_var, p(f"block{i}.shift.weight"), p(f"block{i}.shift.bias"))
            u = ad.scale_shift(u, scale_, shift)
        u = ad.gate(ad.conv2d(u, p(f"block{i}.conv1.weight"), p(f"block{i}.conv1.bias")))
        if arch.attention:
            pooled = ad.mean_pool(u)
            u = ad.mul(u, ad.conv2d(pooled, p(f"block{i}.attn.weight"), p(f"block{i}.attn.bias")))
        u = ad.conv2d(u, p(f"block{i}.conv2.weight"), p(f"block{i}.conv2.bias"))
        h = ad.add(h, u)
    h = _dropout(h, rate, rng)
    out = ad.conv2d(h, p("ending.weight"), p("ending.bias"))
    if arch.residual:
        out = ad.add(out, _leading_channels(inp, arch.out_channels))
    return out


def _leading_channels(x: Var, count: int) -> Var:
    if x.shape[1] == count:
        return x

    def pad(g: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape, dtype=g.dtype)
        out[:, :count] = g
        return out

    return ad.linear_map(x, lambda v: v[:, :count], pad)
