import csv

import numpy as np
import pytest
import torch

from foodenergy.dataset import augment_all
from foodenergy.encoder import (
    CGANEncoder,
    EncoderConfig,
    UNetGenerator,
    denormalize_density,
    normalize_density,
    predict_density,
    train_encoder,
    training_arrays,
    write_loss_csv,
)
from foodenergy.exceptions import DivergenceError, NonPositiveK, ShapeMismatch

TINY = dict(image_size=32, base_filters=8, batch_size=2)


@pytest.fixture(scope="module")
def pairs(scenes):
    return training_arrays(scenes[:8])


@pytest.fixture(scope="module")
def trained(pairs):
    X, y = pairs
    return CGANEncoder(epochs=2, seed=1, **TINY).fit(X, y)


def test_normalize_roundtrip():
    assert normalize_density(np.array([25.0]), 50)[0] == 0.5
    assert denormalize_density(normalize_density(np.array([25.0]), 50), 50)[0] == 25.0
    assert normalize_density(np.array([0.0]), 50)[0] == 0.0
    assert normalize_density(np.array([80.0]), 50)[0] == 1.0
    with pytest.raises(NonPositiveK):
        normalize_density(np.zeros(2), 0)
    with pytest.raises(NonPositiveK):
        denormalize_density(np.zeros(2), -1)


def test_roundtrip_within_float32(scenes):
    d = scenes[0].density_map()
    K = float(d.max())
    back = denormalize_density(normalize_density(d, K), K)
    np.testing.assert_allclose(back, d, rtol=2e-7)


def test_K_is_training_max_so_nothing_clamps(trained, pairs):
    _, y = pairs
    assert trained.density_norm_ == y.max()
    assert normalize_density(y, trained.density_norm_).max() == 1.0
    assert (y / trained.density_norm_ <= 1.0).all()


def test_generator_depth_adapts():
    for size, depth in ((32, 3), (64, 4), (256, 6)):
        model = CGANEncoder(image_size=size, base_filters=4)
        assert model.depth == depth
        g = UNetGenerator(model.depth, 4)
        out = g(torch.zeros(1, 3, size, size))
        assert out.shape == (1, 1, size, size)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(image_size=48)
    with pytest.raises(ValueError):
        EncoderConfig(image_size=16)
    with pytest.raises(NonPositiveK):
        EncoderConfig(density_norm=0.0)
    assert EncoderConfig().epochs == 200 and EncoderConfig().batch_size == 1
    assert EncoderConfig().learning_rate == 0.0002 and EncoderConfig().l1_weight == 100
    assert (EncoderConfig().beta1, EncoderConfig().beta2) == (0.5, 0.999)


def test_zero_epochs_gives_untrained_model(pairs):
    X, y = pairs
    model = CGANEncoder(epochs=0, **TINY).fit(X, y)
    assert model.history_ == [] and model.epochs_trained_ == 0
    assert model.predict(X).shape == y.shape


def test_history_length_and_finiteness(trained, pairs):
    steps = int(np.ceil(len(pairs[0]) / TINY["batch_size"]))
    assert len(trained.history_) == 2 * steps
    assert [r["epoch"] for r in trained.history_] == [0] * steps + [1] * steps
    for r in trained.history_:
        assert all(np.isfinite(r[k]) for k in ("loss_adv_g", "loss_l1", "loss_d"))


def test_training_is_deterministic(pairs, trained):
    X, y = pairs
    again = CGANEncoder(epochs=2, seed=1, **TINY).fit(X, y)
    assert again.history_ == trained.history_
    other = CGANEncoder(epochs=2, seed=2, **TINY).fit(X, y)
    assert other.history_ != trained.history_


def test_predictions_in_range_and_deterministic(trained, pairs):
    X, _ = pairs
    a, b = trained.predict(X), trained.predict(X)
    np.testing.assert_array_equal(a, b)
    assert a.dtype == np.float32
    assert np.isfinite(a).all() and (a >= 0).all() and (a <= trained.density_norm_).all()
    np.testing.assert_array_equal(predict_density(trained, X[0]), a[0])


def test_untrained_inference_deterministic(pairs):
    X, y = pairs
    a = CGANEncoder(epochs=0, seed=4, **TINY).fit(X, y).predict(X)
    b = CGANEncoder(epochs=0, seed=4, **TINY).fit(X, y).predict(X)
    np.testing.assert_array_equal(a, b)


def test_predict_shape_mismatch(trained):
    with pytest.raises(ShapeMismatch):
        trained.predict(np.zeros((1, 64, 64, 3), dtype=np.uint8))


def test_checkpoint_roundtrip_bit_identical(trained, pairs, tmp_path):
    X, _ = pairs
    path = tmp_path / "enc.pt"
    trained.save(path)
    loaded = CGANEncoder.load(path)
    assert loaded.get_params() == trained.get_params()
    assert loaded.density_norm_ == trained.density_norm_
    assert loaded.history_ == trained.history_
    assert loaded.predict(X).tobytes() == trained.predict(X).tobytes()


def test_periodic_checkpoint(pairs, tmp_path):
    X, y = pairs
    path = tmp_path / "ckpt.pt"
    CGANEncoder(epochs=2, save_interval=1, checkpoint_path=str(path), **TINY).fit(X[:2], y[:2])
    assert CGANEncoder.load(path).epochs_trained_ == 2


def test_loss_csv(trained, tmp_path):
    write_loss_csv(trained.history_, tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["epoch", "step", "loss_adv_g", "loss_l1", "loss_d"]
    assert len(rows) == len(trained.history_) + 1


def test_divergence_detected(pairs, monkeypatch):
    X, y = pairs
    original = UNetGenerator.forward
    monkeypatch.setattr(UNetGenerator, "forward", lambda self, x: original(self, x) * float("nan"))
    with pytest.raises(DivergenceError):
        CGANEncoder(epochs=1, **TINY).fit(X, y)


def test_train_encoder_wrapper_and_grayscale_targets(scenes):
    train = augment_all(scenes[:2])
    model = train_encoder(EncoderConfig(epochs=1, **TINY), train)
    assert len(model.history_) == 4
    _, quantized = training_arrays(train, grayscale_scale=1.0)
    assert np.array_equal(quantized, np.round(quantized))
