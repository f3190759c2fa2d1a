"""
Gradient checks for the differentiable op vocabulary, the block networks and AdamW
"""

import numpy as np
import pytest

from app.services import autodiff as ad
from app.services import networks
from app.services.autodiff import ParamStore
from app.services.optim import adamw_step, make_optimizer_state
from app.utils.exceptions import (
    InvalidInputException,
    NumericalException,
    ShapeMismatchException,
    UnsupportedOperationException,
)


def _store(**arrays) -> ParamStore:
    store = ParamStore()
    for name, value in arrays.items():
        store.add(name, np.asarray(value, dtype=np.float64))
    return store


def test_param_store_rejects_duplicates_and_unknown_names():
    store = _store(w=np.zeros(3))
    with pytest.raises(InvalidInputException) as exc:
        store.add("w", np.ones(3))
    assert exc.value.error_code == "DUPLICATE_PARAM"
    with pytest.raises(InvalidInputException):
        store.value("missing")


def test_param_store_copy_is_independent():
    store = _store(w=np.ones(4))
    clone = store.copy()
    store.set_value("w", np.zeros(4))
    np.testing.assert_array_equal(clone.value("w"), np.ones(4))
    store.load_from(clone)
    np.testing.assert_array_equal(store.value("w"), np.ones(4))


def test_elementwise_gradients():
    rng = np.random.default_rng(0)
    store = _store(a=rng.standard_normal((3, 4)), b=rng.standard_normal((1, 4)))
    target = rng.standard_normal((3, 4))

    def loss():
        a, b = ad.parameter(store, "a"), ad.parameter(store, "b")
        return ad.l2_loss(a * b + a - b, target)

    errors = ad.check_gradients(loss, store)
    assert max(errors.values()) < 1e-6


def test_conv_block_gradients():
    rng = np.random.default_rng(1)
    store = _store(
        w=rng.standard_normal((4, 2, 3, 3)) * 0.3,
        b=rng.standard_normal(4) * 0.1,
        a=rng.standard_normal((2, 2, 1, 1)) * 0.3,
        ab=np.ones(2),
    )
    x = rng.standard_normal((2, 2, 6, 6))
    target = rng.standard_normal((2, 2, 6, 6))

    def loss():
        h = ad.gate(ad.conv2d(ad.constant(x), ad.parameter(store, "w"), ad.parameter(store, "b")))
        attn = ad.conv2d(ad.mean_pool(h), ad.parameter(store, "a"), ad.parameter(store, "ab"))
        return ad.l2_loss(ad.mul(h, attn), target)

    errors = ad.check_gradients(loss, store)
    assert max(errors.values()) < 1e-6


def test_affine_scale_shift_gradients():
    rng = np.random.default_rng(2)
    store = _store(ws=rng.standard_normal((3, 4)), bs=np.zeros(3), wh=rng.standard_normal((3, 4)), bh=np.zeros(3))
    x = rng.standard_normal((2, 3, 5, 5))
    e = rng.standard_normal((2, 4))
    target = rng.standard_normal((2, 3, 5, 5))

    def loss():
        emb = ad.constant(e)
        scale_ = ad.affine(emb, ad.parameter(store, "ws"), ad.parameter(store, "bs"))
        shift = ad.affine(emb, ad.parameter(store, "wh"), ad.parameter(store, "bh"))
        return ad.l1_loss(ad.scale_shift(ad.constant(x), scale_, shift), target)

    errors = ad.check_gradients(loss, store)
    assert max(errors.values()) < 1e-5


def test_spectral_filter_gradients():
    rng = np.random.default_rng(3)
    n_fft = 32
    base = np.abs(rng.standard_normal(n_fft // 2 + 1)) + 0.1
    store = _store(p=rng.standard_normal((3, 12)), g=rng.standard_normal(n_fft // 2 + 1) * 0.1)
    target = rng.standard_normal((3, 12))

    def loss():
        return ad.l2_loss(ad.spectral_filter(ad.parameter(store, "p"), ad.parameter(store, "g"), base, n_fft), target)

    errors = ad.check_gradients(loss, store)
    assert max(errors.values()) < 1e-6


def test_linear_map_uses_given_adjoint():
    rng = np.random.default_rng(4)
    matrix = rng.standard_normal((5, 3))
    store = _store(x=rng.standard_normal((2, 3)))
    target = rng.standard_normal((2, 5))

    def loss():
        return ad.l2_loss(ad.linear_map(ad.parameter(store, "x"), lambda v: v @ matrix.T, lambda g: g @ matrix), target)

    errors = ad.check_gradients(loss, store)
    assert max(errors.values()) < 1e-6


def test_network_gradients_with_time_embedding():
    arch = networks.BlockArchitecture(in_channels=2, out_channels=1, width=4, blocks=2, emb_dim=4, residual=True)
    store = networks.init_params(arch, np.random.default_rng(5)).astype(np.float64)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 2, 6, 6))
    emb = rng.standard_normal((2, 4))
    target = rng.standard_normal((2, 1, 6, 6))

    def loss():
        return ad.l2_loss(networks.forward(store, arch, x, emb), target)

    errors = ad.check_gradients(loss, store, max_entries=8)
    assert max(errors.values()) < 1e-5


def test_network_rejects_wrong_channels_and_embedding():
    arch = networks.BlockArchitecture(in_channels=2, out_channels=1, width=4, blocks=1, emb_dim=4)
    store = networks.init_params(arch, np.random.default_rng(0))
    with pytest.raises(ShapeMismatchException):
        networks.forward(store, arch, np.zeros((1, 3, 6, 6), dtype=np.float32), np.zeros((1, 4)))
    with pytest.raises(ShapeMismatchException) as exc:
        networks.forward(store, arch, np.zeros((1, 2, 6, 6), dtype=np.float32), np.zeros((1, 6)))
    assert exc.value.error_code == "EMBEDDING_MISMATCH"
    with pytest.raises(ShapeMismatchException) as exc:
        networks.forward(store, arch, np.zeros((1, 2, 6, 6), dtype=np.float32))
    assert exc.value.error_code == "MISSING_EMBEDDING"


def test_zero_tail_residual_network_starts_as_identity():
    arch = networks.BlockArchitecture(
        in_channels=1, out_channels=1, width=4, blocks=2, bias=False, attention=False, residual=True, zero_tail=True
    )
    store = networks.init_params(arch, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((2, 1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(networks.forward(store, arch, x).value, x)


def test_architecture_meta_round_trip():
    arch = networks.BlockArchitecture(in_channels=2, out_channels=1, width=8, blocks=3, emb_dim=16, dropout=0.1)
    assert networks.BlockArchitecture.from_meta(arch.to_meta()) == arch
    assert arch.injection_sites() == (0, 2)


def test_backward_rejects_unregistered_op():
    store = _store(w=np.ones(3))
    node = ad.Var(np.ones(3), (ad.parameter(store, "w"),), "softmax", lambda g: (g,))
    with pytest.raises(UnsupportedOperationException) as exc:
        ad.backward(ad.l2_loss(node, np.zeros(3)))
    assert exc.value.details["op"] == "softmax"


def test_backward_needs_scalar():
    store = _store(w=np.ones(3))
    with pytest.raises(InvalidInputException):
        ad.backward(ad.parameter(store, "w"))


def test_gradients_accumulate_until_zeroed():
    store = _store(w=np.array([2.0]))
    for _ in range(2):
        ad.backward(ad.l2_loss(ad.parameter(store, "w"), np.zeros(1)))
    np.testing.assert_allclose(store.grad("w"), [8.0])
    store.zero_grad()
    np.testing.assert_array_equal(store.grad("w"), [0.0])


def test_adamw_minimizes_quadratic():
    store = _store(w=np.array([3.0, -2.0]))
    state = make_optimizer_state(store, lr=0.1)
    for _ in range(300):
        store.zero_grad()
        ad.backward(ad.l2_loss(ad.parameter(store, "w"), np.array([1.0, 1.0])))
        adamw_step(store, state)
    np.testing.assert_allclose(store.value("w"), [1.0, 1.0], atol=1e-2)


def test_adamw_first_step_size_equals_lr():
    store = _store(w=np.array([5.0]))
    state = make_optimizer_state(store, lr=0.01)
    ad.backward(ad.l2_loss(ad.parameter(store, "w"), np.zeros(1)))
    adamw_step(store, state)
    np.testing.assert_allclose(store.value("w"), [4.99], atol=1e-6)


def test_cosine_learning_rate_schedule():
    state = make_optimizer_state(_store(w=np.zeros(1)), lr=1.0, lr_min=0.1, total_steps=10)
    assert state.current_lr() == pytest.approx(1.0)
    state.step = 5
    assert state.current_lr() == pytest.approx(0.55)
    state.step = 10
    assert state.current_lr() == pytest.approx(0.1)


def test_adamw_refuses_non_finite_gradients():
    store = _store(w=np.zeros(2))
    store.accumulate("w", np.array([np.nan, 0.0]))
    with pytest.raises(NumericalException) as exc:
        adamw_step(store, make_optimizer_state(store))
    assert exc.value.error_code == "NAN_GRADIENT"
