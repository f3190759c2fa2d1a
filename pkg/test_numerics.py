"""
Tests for the dense kernels: 1-D FFT and same-padded convolution
"""

import numpy as np
import pytest
from scipy import signal

from app.services import numerics
from app.utils.exceptions import InvalidInputException, ShapeMismatchException


@pytest.mark.parametrize("n,expected", [(1, 2), (3, 8), (64, 128), (65, 256), (100, 256)])
def test_padded_length_is_next_power_of_two(n, expected):
    assert numerics.padded_length(n) == expected


def test_fft_round_trip_with_padding():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 37)).astype(np.float32)
    spectrum = numerics.fft_1d(x, n=128)
    assert spectrum.shape == (3, 128)
    back = numerics.ifft_1d(spectrum)[..., :37]
    np.testing.assert_allclose(back, x, atol=1e-5)


def test_fft_matches_numpy_for_impulse():
    x = np.zeros(16)
    x[0] = 1.0
    np.testing.assert_allclose(numerics.fft_1d(x), np.ones(16), atol=1e-12)


def test_fft_rejects_empty_signal():
    with pytest.raises(InvalidInputException) as exc:
        numerics.fft_1d(np.zeros((2, 0)))
    assert exc.value.error_code == "EMPTY_SIGNAL"


def test_conv2d_matches_scipy_correlate():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 9, 11))
    kernel = rng.standard_normal((3, 2, 3, 5))
    bias = rng.standard_normal(3)
    out = numerics.conv2d(x, kernel, bias)
    assert out.shape == (3, 9, 11)
    for k in range(3):
        expected = sum(signal.correlate2d(x[c], kernel[k, c], mode="same") for c in range(2)) + bias[k]
        np.testing.assert_allclose(out[k], expected, atol=1e-10)


def test_conv2d_is_linear_in_input_and_kernel():
    rng = np.random.default_rng(3)
    x1, x2 = rng.standard_normal((2, 2, 3, 7, 6))
    k1, k2 = rng.standard_normal((2, 4, 3, 3, 3))
    a, b = 1.7, -0.4
    np.testing.assert_allclose(
        numerics.conv2d(a * x1 + b * x2, k1), a * numerics.conv2d(x1, k1) + b * numerics.conv2d(x2, k1), atol=1e-12
    )
    np.testing.assert_allclose(
        numerics.conv2d(x1, a * k1 + b * k2), a * numerics.conv2d(x1, k1) + b * numerics.conv2d(x1, k2), atol=1e-12
    )


def test_conv2d_backward_input_is_adjoint():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 8, 8))
    kernel = rng.standard_normal((4, 3, 3, 3))
    g = rng.standard_normal((2, 4, 8, 8))
    grad_x, grad_k, grad_b = numerics.conv2d_backward(x, kernel, g)
    lhs = np.sum(numerics.conv2d(x, kernel) * g)
    np.testing.assert_allclose(lhs, np.sum(x * grad_x), rtol=1e-10)
    np.testing.assert_allclose(lhs, np.sum(kernel * grad_k), rtol=1e-10)
    np.testing.assert_allclose(grad_b, g.sum(axis=(0, 2, 3)), rtol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeMismatchException) as exc:
        numerics.conv2d(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)))
    assert exc.value.error_code == "CHANNEL_MISMATCH"


def test_conv2d_even_kernel_rejected():
    with pytest.raises(InvalidInputException) as exc:
        numerics.conv2d(np.zeros((1, 5, 5)), np.zeros((1, 1, 2, 3)))
    assert exc.value.error_code == "EVEN_KERNEL"


def test_conv2d_bad_rank():
    with pytest.raises(ShapeMismatchException):
        numerics.conv2d(np.zeros((5, 5)), np.zeros((1, 1, 3, 3)))
