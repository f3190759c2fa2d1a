"""
Tests for the MMSE restorer
"""

import numpy as np
import pytest

from app.models.config import NetworkTrainConfig
from app.models.geometry import Geometry
from app.services import autodiff as ad
from app.services import phantoms, tomography
from app.services.restorer import Restorer, restore, train_restorer
from app.utils.container import load_params, save_params
from app.utils.exceptions import DatasetException, ShapeMismatchException


def _pairs(count: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    clean = np.stack([phantoms.disk_phantom(16, radius=r) for r in rng.uniform(0.2, 0.4, count)])
    noisy = clean + 0.1 * rng.standard_normal(clean.shape).astype(np.float32)
    return noisy.astype(np.float32), clean


def test_restore_shapes():
    model = Restorer.create(width=4, blocks=1, image_shape=(16, 16))
    noisy, _ = _pairs(3)
    assert restore(noisy, model).shape == (3, 16, 16)
    single = restore(noisy[1], model)
    assert single.shape == (16, 16)
    np.testing.assert_allclose(single, restore(noisy, model)[1], rtol=1e-5, atol=1e-6)


def test_restore_rejects_wrong_shape():
    model = Restorer.create(width=4, blocks=1, image_shape=(16, 16))
    with pytest.raises(ShapeMismatchException) as exc:
        restore(np.zeros((8, 8)), model)
    assert exc.value.error_code == "SHAPE_MISMATCH"
    with pytest.raises(ShapeMismatchException):
        restore(np.zeros(16), model)


def test_restorer_gradients():
    model = Restorer.create(width=4, blocks=1, seed=2)
    model.params = model.params.astype(np.float64)
    rng = np.random.default_rng(3)
    x = rng.random((2, 6, 6))
    target = rng.random((2, 1, 6, 6))

    def loss():
        return ad.l2_loss(model.graph(x), target)

    errors = ad.check_gradients(loss, model.params, max_entries=6)
    assert max(errors.values()) < 1e-4


def test_train_restorer_reduces_validation_error():
    noisy, clean = _pairs(10)
    cfg = NetworkTrainConfig(steps=80, batch_size=4, lr=3e-3, width=8, blocks=1, emb_dim=4, dropout=0.0, eval_every=20)
    model = Restorer.from_config(cfg)
    model, report = train_restorer((noisy[:8], clean[:8]), model, cfg, validation=(noisy[8:], clean[8:]))
    assert report.kind == "restorer"
    assert len(report.losses) == 80
    assert model.image_shape == (16, 16)
    assert report.validation["best_mse"] < report.validation["initial_mse"]
    final = float(np.mean(np.square(restore(noisy[8:], model).astype(np.float64) - clean[8:])))
    assert final == pytest.approx(report.validation["best_mse"], rel=1e-5)


def test_trained_restorer_beats_limited_angle_fbp():
    geom = Geometry(size=16, angle_step=6.0, theta_miss=60.0)
    rng = np.random.default_rng(4)
    clean = np.stack([phantoms.disk_phantom(16, radius=r) for r in rng.uniform(0.2, 0.4, 12)])
    fbp_images = np.stack([tomography.fbp(tomography.radon(image, geom)) for image in clean]).astype(np.float32)
    cfg = NetworkTrainConfig(steps=150, batch_size=4, lr=3e-3, width=8, blocks=2, emb_dim=4, dropout=0.0, eval_every=10)
    model, _ = train_restorer(
        (fbp_images[:10], clean[:10]), Restorer.from_config(cfg), cfg, validation=(fbp_images[10:], clean[10:])
    )
    fbp_error = np.linalg.norm(fbp_images[10:] - clean[10:])
    restored_error = np.linalg.norm(restore(fbp_images[10:], model) - clean[10:])
    assert restored_error <= fbp_error


def test_train_restorer_without_validation():
    noisy, clean = _pairs(4)
    cfg = NetworkTrainConfig(steps=5, batch_size=2, width=4, blocks=1, emb_dim=4, loss="l1")
    _, report = train_restorer((noisy, clean), Restorer.from_config(cfg), cfg)
    assert report.validation == {}
    assert report.metadata["loss"] == "l1"


def test_train_restorer_input_errors():
    cfg = NetworkTrainConfig(steps=1, width=4, blocks=1, emb_dim=4)
    with pytest.raises(DatasetException) as exc:
        train_restorer((np.zeros((0, 8, 8)), np.zeros((0, 8, 8))), Restorer.from_config(cfg), cfg)
    assert exc.value.error_code == "EMPTY_DATASET"
    with pytest.raises(ShapeMismatchException):
        train_restorer((np.zeros((2, 8, 8)), np.zeros((3, 8, 8))), Restorer.from_config(cfg), cfg)


def test_restorer_checkpoint_round_trip(tmp_path):
    model = Restorer.create(width=4, blocks=2, seed=4, image_shape=(16, 16))
    save_params(tmp_path / "restorer.rnt", model.params, model.meta())
    params, meta = load_params(tmp_path / "restorer.rnt")
    restored = Restorer.from_checkpoint(params, meta)
    assert restored.arch == model.arch
    assert tuple(restored.image_shape) == (16, 16)
    noisy, _ = _pairs(2)
    np.testing.assert_array_equal(restore(noisy, restored), restore(noisy, model))
