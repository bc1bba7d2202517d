import numpy as np
import pytest

from gerscan.net import (
    CheckpointError,
    LossConfig,
    SegConfig,
    SegModel,
    TrainConfig,
    TrainingDiverged,
    gradient_check,
    load_model,
    loss_and_param_grad,
    save_model,
    train,
    write_training_log,
)

TINY = SegConfig(
    stage_widths=(2, 3),
    stage_strides=(1, 2),
    aspp_rates=(1, 2),
    aspp_width=3,
    dtype="float64",
    seed=3,
)

SMALL = SegConfig(
    stage_widths=(4, 8),
    stage_strides=(1, 2),
    aspp_rates=(1, 2),
    aspp_width=8,
    seed=7,
)


def _toy_samples(n=4, size=24, seed=0):
    """Bright-square-on-dark tiles with matching masks, plus empty tiles."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        img = rng.integers(20, 60, size=(size, size, 3), dtype=np.int64).astype(np.uint8)
        mask = np.zeros((size, size), dtype=np.uint8)
        if i % 2 == 0:
            r0, c0 = 4 + 2 * i, 6
            img[r0 : r0 + 8, c0 : c0 + 8] = 220
            mask[r0 : r0 + 8, c0 : c0 + 8] = 1
        samples.append((img, mask))
    return samples


def test_forward_shape_and_scaling():
    model = SegModel(SMALL)
    img = np.full((32, 32, 3), 255, dtype=np.uint8)
    logits = model.forward(img)
    assert logits.shape == (32, 32, 2)
    # uint8 inputs are scaled to [0, 1]: feeding 1.0 floats must match 255s
    np.testing.assert_allclose(model.forward(np.ones((32, 32, 3))), logits, atol=1e-6)


def test_default_config_downsamples_by_four():
    cfg = SegConfig()
    assert cfg.downsample == 4
    model = SegModel(cfg)
    logits = model.forward(np.zeros((64, 64, 3), dtype=np.uint8))
    assert logits.shape == (64, 64, 2)


def test_flat_param_round_trip():
    model = SegModel(TINY)
    flat = model.get_flat_params()
    assert flat.size == model.param_count()
    flat2 = flat.copy()
    flat2[::7] += 0.25
    model.set_flat_params(flat2)
    np.testing.assert_array_equal(model.get_flat_params(), flat2)


def _jitter(model, rng, scale=0.05):
    # move off the symmetric init: zero biases put some pre-activations
    # exactly on the ReLU kink, where a two-sided probe is meaningless
    flat = model.get_flat_params()
    model.set_flat_params(flat + rng.normal(scale=scale, size=flat.size))


@pytest.mark.parametrize(
    "config",
    [LossConfig(kind="ce"), LossConfig(kind="damped", weight_by="target"), LossConfig()],
    ids=["ce", "damped-target", "damped-prediction"],
)
def test_gradient_check_small_model(config):
    model = SegModel(TINY)
    assert model.param_count() <= 5000
    rng = np.random.default_rng(1)
    _jitter(model, rng)
    image = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
    mask = rng.integers(0, 2, size=(8, 8)).astype(np.uint8)
    err = gradient_check(model, image, mask, config)
    assert err < 1e-4, f"max relative gradient error {err}"


def test_gradient_check_requires_float64():
    model = SegModel(SMALL)
    with pytest.raises(ValueError):
        gradient_check(model, np.zeros((8, 8, 3), dtype=np.uint8), np.zeros((8, 8), dtype=np.uint8))


def test_training_reduces_loss_and_logs(tmp_path):
    samples = _toy_samples()
    model = SegModel(SMALL)
    config = TrainConfig(epochs=8, learning_rate=0.05, shuffle_seed=1)
    history = train(model, samples, samples, config)
    assert len(history) == 8
    assert history[-1].train_loss < history[0].train_loss
    assert [h.epoch for h in history] == list(range(1, 9))

    log = tmp_path / "training.csv"
    write_training_log(log, history)
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,eval_f1_ger,eval_miou_ger,eval_pixel_acc"
    assert len(lines) == 9


def test_training_is_deterministic():
    samples = _toy_samples()
    runs = []
    for _ in range(2):
        model = SegModel(SMALL)
        history = train(model, samples, samples, TrainConfig(epochs=3, shuffle_seed=5))
        runs.append((history, model.get_flat_params()))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_training_divergence_aborts():
    samples = _toy_samples(n=2)
    model = SegModel(SMALL)
    config = TrainConfig(epochs=50, learning_rate=1e4, shuffle_seed=0)
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
        train(model, samples, samples, config)


def test_loss_and_param_grad_covers_every_param():
    model = SegModel(TINY)
    rng = np.random.default_rng(2)
    image = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
    mask = rng.integers(0, 2, size=(8, 8)).astype(np.uint8)
    loss, grads = loss_and_param_grad(model, image, mask, LossConfig())
    assert np.isfinite(loss)
    assert set(grads) == set(model.params)
    for name, g in grads.items():
        assert g.shape == model.params[name].shape


def test_checkpoint_round_trip(tmp_path):
    model = SegModel(SMALL)
    samples = _toy_samples(n=2)
    train(model, samples, samples, TrainConfig(epochs=1))
    path = tmp_path / "model.gseg"
    save_model(model, path)

    loaded = load_model(path)
    assert loaded.config == model.config
    for name in model.params:
        np.testing.assert_array_equal(loaded.params[name], model.params[name])
    img = samples[0][0]
    np.testing.assert_array_equal(loaded.predict(img), model.predict(img))


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.gseg"
    bad.write_bytes(b"PNG\x0d\x0a not a checkpoint")
    with pytest.raises(CheckpointError):
        load_model(bad)

    model = SegModel(TINY)
    good = tmp_path / "good.gseg"
    save_model(model, good)
    data = good.read_bytes()
    truncated = tmp_path / "trunc.gseg"
    truncated.write_bytes(data[: len(data) - 50])
    with pytest.raises(CheckpointError):
        load_model(truncated)
