"""
Dense array kernels shared by the tomography operators and the small networks:
1-D FFT along the last axis and same-padded 2-D convolution with its adjoints.
"""

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.utils.exceptions import InvalidInputException, ShapeMismatchException


def padded_length(n: int) -> int:
    """Next power of two >= 2n, the zero-padded length used for ramp filtering"""
    if n < 1:
        raise InvalidInputException("Length must be positive", error_code="EMPTY_SIGNAL", details={"n": n})
    return 1 << int(np.ceil(np.log2(2 * n)))


def fft_1d(signal: np.ndarray, n: Optional[int] = None) -> np.ndarray:
    """
    Complex spectrum along the last axis.

    Args:
        signal: real or complex samples, last axis is transformed
        n: optional transform length; shorter signals are zero-padded

    Returns:
        Complex spectrum with ``n`` (or the signal length) bins
    """
    signal = np.asarray(signal)
    if signal.size == 0 or signal.shape[-1] == 0:
        raise InvalidInputException("Cannot transform an empty signal", error_code="EMPTY_SIGNAL")
    # float64 accumulation keeps round trips well inside 1e-5 for long signals
    work = signal.astype(np.complex128 if np.iscomplexobj(signal) else np.float64)
    return np.fft.fft(work, n=n, axis=-1)


def ifft_1d(spectrum: np.ndarray, n: Optional[int] = None, real: bool = True) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    if spectrum.size == 0 or spectrum.shape[-1] == 0:
        raise InvalidInputException("Cannot transform an empty spectrum", error_code="EMPTY_SIGNAL")
    out = np.fft.ifft(spectrum.astype(np.complex128), n=n, axis=-1)
    return out.real if real else out


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatchException(
        "Convolution input must be [C,H,W] or [B,C,H,W]",
        error_code="SHAPE_MISMATCH",
        details={"shape": list(x.shape)},
    )


def _check_kernel(x: np.ndarray, kernel: np.ndarray):
    if kernel.ndim != 4:
        raise ShapeMismatchException(
            "Kernel must be [K,C,kh,kw]", error_code="SHAPE_MISMATCH", details={"shape": list(kernel.shape)}
        )
    _, channels, kh, kw = kernel.shape
    if x.shape[1] != channels:
        raise ShapeMismatchException(
            f"Channel mismatch: input has {x.shape[1]}, kernel expects {channels}",
            error_code="CHANNEL_MISMATCH",
            details={"input": list(x.shape), "kernel": list(kernel.shape)},
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidInputException(
            "Kernel sizes must be odd", error_code="EVEN_KERNEL", details={"kernel": list(kernel.shape)}
        )


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-padded patches of a [B,C,H,W] batch as a [B*H*W, C*kh*kw] matrix"""
    batch, channels, height, width = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * height * width, channels * kh * kw)


def conv2d(input: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Same-padded cross-correlation.

    Accepts [C,H,W] (returns [K,H,W]) or a batch [B,C,H,W] (returns [B,K,H,W]).
    """
    x, squeeze = _as_batch(input)
    kernel = np.asarray(kernel)
    _check_kernel(x, kernel)
    out_channels, _, kh, kw = kernel.shape
    batch, _, height, width = x.shape

    cols = im2col(x, kh, kw)
    out = cols @ kernel.reshape(out_channels, -1).T
    if bias is not None:
        out = out + np.asarray(bias).reshape(1, out_channels)
    out = np.ascontiguousarray(out.reshape(batch, height, width, out_channels).transpose(0, 3, 1, 2))
    return out[0] if squeeze else out


def conv2d_backward(
    input: np.ndarray, kernel: np.ndarray, grad_output: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradients of a same-padded conv2d with respect to input, kernel and bias.

    The input gradient is the adjoint convolution: the kernel rotated by 180
    degrees with its channel axes swapped.
    """
    x, squeeze = _as_batch(input)
    g, _ = _as_batch(grad_output)
    kernel = np.asarray(kernel)
    out_channels, _, kh, kw = kernel.shape

    cols = im2col(x, kh, kw)
    g_mat = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
    grad_kernel = (g_mat.T @ cols).reshape(kernel.shape)
    grad_bias = g_mat.sum(axis=0)

    adjoint = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_input = conv2d(g, adjoint)
    return (grad_input[0] if squeeze else grad_input), grad_kernel, grad_bias
