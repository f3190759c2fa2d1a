"""
Tests for the score oracles, the time embedding and the conditional denoiser
"""

import numpy as np
import pytest

from app.models.config import NetworkTrainConfig
from app.services import autodiff as ad
from app.services import mrsde
from app.services.score import (
    CondDenoiser,
    GaussianOracle,
    OptimalScoreOracle,
    denoiser_forward,
    oracle_score,
    time_embedding,
    train_score,
)
from app.services.training import smoothed
from app.utils.container import load_params, save_params
from app.utils.exceptions import DatasetException, InvalidInputException, ShapeMismatchException


@pytest.fixture
def sched():
    return mrsde.make_schedule(20, 0.01)


def test_time_embedding_layout():
    emb = time_embedding(0, 8)
    np.testing.assert_array_equal(emb, [0, 0, 0, 0, 1, 1, 1, 1])
    batch = time_embedding(np.array([1, 5, 9]), 16)
    assert batch.shape == (3, 16)
    np.testing.assert_allclose(batch[:, :8] ** 2 + batch[:, 8:] ** 2, 1.0)


@pytest.mark.parametrize("dim", [0, 7])
def test_time_embedding_rejects_odd_dimension(dim):
    with pytest.raises(InvalidInputException) as exc:
        time_embedding(3, dim)
    assert exc.value.error_code == "ODD_EMBEDDING"


def test_gaussian_oracle_with_point_prior_is_conditional_score(sched):
    x0 = np.array([0.2, 0.9])
    mu = np.array([0.5, 0.5])
    oracle = GaussianOracle(sched, m0=x0, var0=np.zeros(2))
    x_t = np.array([0.3, 0.6])
    for t in (1, 7, 20):
        np.testing.assert_allclose(oracle.evaluate(x_t, mu, t), mrsde.conditional_score(x_t, x0, mu, t, sched))


def test_gaussian_oracle_matches_log_density_gradient(sched):
    oracle = GaussianOracle(sched, m0=np.array([0.7]), var0=np.array([0.05]))
    mu = np.array([0.4])
    t = 9
    mean, var = oracle.marginal(mu, t)

    def log_density(x):
        return -0.5 * (x - mean) ** 2 / var

    x = np.array([0.55])
    h = 1e-6
    numeric = (log_density(x + h) - log_density(x - h)) / (2 * h)
    np.testing.assert_allclose(oracle_score(x, mu, t, sched, oracle), numeric, rtol=1e-6)


def test_gaussian_oracle_zero_variance(sched):
    oracle = GaussianOracle(sched, m0=np.zeros(1), var0=np.zeros(1))
    with pytest.raises(InvalidInputException) as exc:
        oracle.evaluate(np.zeros(1), np.zeros(1), 0)
    assert exc.value.error_code == "ZERO_VARIANCE"


def test_gaussian_oracle_rejects_negative_variance(sched):
    with pytest.raises(InvalidInputException):
        GaussianOracle(sched, m0=np.zeros(1), var0=-np.ones(1))


def test_optimal_score_oracle_delegates(sched):
    x0 = np.full((4, 4), 0.8)
    mu = np.full((4, 4), 0.5)
    x_t = np.full((4, 4), 0.6)
    oracle = OptimalScoreOracle(sched, x0)
    np.testing.assert_array_equal(oracle.evaluate(x_t, mu, 5), mrsde.optimal_score(x_t, x0, mu, 5, sched))


def test_denoiser_shapes_and_single_image(sched):
    model = CondDenoiser.create(sched, width=4, blocks=2, emb_dim=8, dropout=0.0)
    rng = np.random.default_rng(0)
    x = rng.random((3, 8, 8)).astype(np.float32)
    mu = rng.random((3, 8, 8)).astype(np.float32)
    batch = model.evaluate(x, mu, 4)
    assert batch.shape == (3, 8, 8)
    single = denoiser_forward(x[1], mu[1], 4, model)
    assert single.shape == (8, 8)
    np.testing.assert_allclose(single, batch[1], rtol=1e-5, atol=1e-6)


def test_denoiser_output_depends_on_step(sched):
    model = CondDenoiser.create(sched, width=4, blocks=2, emb_dim=8, dropout=0.0, seed=1)
    rng = np.random.default_rng(2)
    x = rng.random((8, 8)).astype(np.float32)
    mu = rng.random((8, 8)).astype(np.float32)
    early = model.predict_noise(x, mu, 2).value
    late = model.predict_noise(x, mu, 9).value
    assert np.max(np.abs(early - late)) > 1e-4
    # beyond the -1 / sqrt(v_t) factor, the network itself sees t
    scaled = denoiser_forward(x, mu, 9, model) * np.sqrt(sched.variance(9) / sched.variance(2))
    assert np.max(np.abs(scaled - denoiser_forward(x, mu, 2, model))) > 1e-4


def test_denoiser_is_undefined_at_t_zero(sched):
    model = CondDenoiser.create(sched, width=4, blocks=1, emb_dim=4)
    with pytest.raises(InvalidInputException) as exc:
        model.evaluate(np.zeros((8, 8)), np.zeros((8, 8)), 0)
    assert exc.value.error_code == "ZERO_VARIANCE"


def test_denoiser_shape_mismatch(sched):
    model = CondDenoiser.create(sched, width=4, blocks=1, emb_dim=4)
    with pytest.raises(ShapeMismatchException):
        model.evaluate(np.zeros((8, 8)), np.zeros((6, 6)), 3)
    with pytest.raises(ShapeMismatchException):
        model.evaluate(np.zeros(8), np.zeros(8), 3)


def test_denoiser_gradients(sched):
    model = CondDenoiser.create(sched, width=4, blocks=2, emb_dim=4, dropout=0.0, seed=3)
    model.params = model.params.astype(np.float64)
    rng = np.random.default_rng(1)
    x = rng.random((2, 6, 6))
    mu = rng.random((2, 6, 6))
    target = rng.standard_normal((2, 1, 6, 6))

    def loss():
        out = model.predict_noise(x, mu, np.array([3, 11]))
        return ad.l2_loss(out, target)

    errors = ad.check_gradients(loss, model.params, max_entries=6)
    assert max(errors.values()) < 1e-4


def test_denoiser_checkpoint_round_trip(tmp_path, sched):
    model = CondDenoiser.create(sched, width=4, blocks=2, emb_dim=8, seed=5)
    save_params(tmp_path / "score.rnt", model.params, model.meta())
    params, meta = load_params(tmp_path / "score.rnt")
    restored = CondDenoiser.from_checkpoint(params, meta)
    assert restored.arch == model.arch
    assert restored.sched.T == sched.T
    x = np.random.default_rng(2).random((8, 8))
    np.testing.assert_array_equal(restored.evaluate(x, x, 7), model.evaluate(x, x, 7))


def test_train_score_overfits_fixed_batch():
    sched = mrsde.make_schedule(4, 1.0)
    rng = np.random.default_rng(0)
    x0 = rng.random((2, 8, 8)).astype(np.float32)
    cfg = NetworkTrainConfig(
        steps=300, batch_size=2, lr=5e-3, width=8, blocks=2, emb_dim=8, dropout=0.0, fixed_batch=True, eval_every=100
    )
    model = CondDenoiser.from_config(sched, cfg)
    model, report = train_score((x0, x0.copy()), sched, model, cfg)
    assert report.kind == "score"
    assert len(report.losses) == 300
    curve = smoothed(report.losses, window=50)
    assert curve[-1] < 0.5 * curve[0]
    assert report.best_loss <= report.final_loss


def test_train_score_validates_inputs(sched):
    cfg = NetworkTrainConfig(steps=1, width=4, blocks=1, emb_dim=4)
    model = CondDenoiser.from_config(sched, cfg)
    with pytest.raises(DatasetException):
        train_score((np.zeros((0, 8, 8)), np.zeros((0, 8, 8))), sched, model, cfg)
    with pytest.raises(ShapeMismatchException):
        train_score((np.zeros((2, 8, 8)), np.zeros((2, 6, 6))), sched, model, cfg)
    with pytest.raises(InvalidInputException) as exc:
        train_score((np.zeros((2, 8, 8)), np.zeros((2, 8, 8))), mrsde.make_schedule(30, 0.01), model, cfg)
    assert exc.value.error_code == "SCHEDULE_MISMATCH"
