import numpy as np
import pytest

from landtransfer.classifier import (
    ClassifierModel,
    ModelFormatError,
    TrainConfig,
    TrainingError,
    embed,
    extract_features,
    feature_length,
    fine_tune,
    fine_tune_features,
    load_model,
    loss_and_grads,
    mean_loss,
    orientation_bins,
    predict_proba,
    predict_proba_features,
    save_model,
    train,
    train_features,
)
from landtransfer.patching import LabeledSample, Patch
from landtransfer.raster import MultibandRaster


def _patch(data):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    return Patch(MultibandRaster(data), (0, 0), data.shape[-1], (data.shape[-1] // 2, data.shape[-2] // 2))


def _clusters(n=200, d=6, sep=3.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, d))
    x[:, 0] += np.where(y == 1, sep, -sep)
    return x, y


def _finite_difference(params, x, y, eps=1e-6):
    grads = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            g[idx] = (loss_and_grads(plus, x, y)[0] - loss_and_grads(minus, x, y)[0]) / (2 * eps)
        grads.append(g)
    return grads


def test_constant_patch_features():
    f = extract_features(_patch(np.full((2, 8, 8), 100.0)))
    assert f.intensity.shape == (2, 16)
    np.testing.assert_array_equal(f.intensity[:, 6], 1.0)
    assert f.intensity.sum() == 2.0
    np.testing.assert_array_equal(f.gradient, 0.0)
    np.testing.assert_allclose(f.means, 100 / 255)
    np.testing.assert_allclose(f.stds, 0.0)
    assert f.vector.shape == (feature_length(2),)


def test_intensity_histogram_is_row_permutation_invariant():
    rng = np.random.default_rng(0)
    data = rng.uniform(0, 255, size=(3, 8, 8))
    a = extract_features(_patch(data))
    b = extract_features(_patch(data[:, ::-1, :]))
    np.testing.assert_array_equal(a.intensity, b.intensity)


def test_vertical_step_edge_gives_horizontal_gradient_bin():
    data = np.zeros((8, 8))
    data[:, 4:] = 200.0
    f = extract_features(_patch(data))
    # a vertical edge has a purely horizontal gradient, bin 0
    assert f.gradient[0] == pytest.approx(1.0)
    assert f.gradient.sum() == pytest.approx(1.0)


def test_orientation_bins_are_unsigned():
    gx = np.array([1.0, -1.0, 0.0, 0.0, 1.0])
    gy = np.array([0.0, 0.0, 1.0, -1.0, 1.0])
    np.testing.assert_array_equal(orientation_bins(gx, gy), [0, 0, 4, 4, 2])


def test_histogram_blocks_sum_to_one():
    rng = np.random.default_rng(1)
    f = extract_features(_patch(rng.uniform(0, 255, size=(3, 16, 16))))
    np.testing.assert_allclose(f.intensity.sum(axis=1), 1.0)
    assert f.gradient.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d, h, k, n = rng.integers(2, 6), rng.integers(2, 6), rng.integers(2, 5), 7
    params = [rng.normal(size=(d, h)), rng.normal(size=h), rng.normal(size=(h, k)), rng.normal(size=k)]
    x = rng.normal(size=(n, d))
    y = rng.integers(0, k, size=n)
    _, analytic = loss_and_grads(params, x, y)
    for a, b in zip(analytic, _finite_difference(params, x, y)):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-8)


def test_two_clusters_train_to_high_accuracy():
    x, y = _clusters()
    m = train_features(x, y, TrainConfig(seed=0))
    xt, yt = _clusters(seed=1)
    assert np.mean(predict_proba_features(m, x).argmax(1) == y) >= 0.95
    assert np.mean(predict_proba_features(m, xt).argmax(1) == yt) >= 0.95


def test_training_lowers_loss_below_initial_model():
    x, y = _clusters()
    untrained = train_features(x, y, TrainConfig(seed=0, epochs=0))
    trained = train_features(x, y, TrainConfig(seed=0))
    assert mean_loss(trained, x, y) < mean_loss(untrained, x, y)


def test_single_class_is_coverage_error():
    x, _ = _clusters()
    with pytest.raises(TrainingError, match="class coverage"):
        train_features(x, np.zeros(len(x), dtype=int), TrainConfig())
    with pytest.raises(TrainingError, match="class coverage"):
        train_features(x, np.zeros(len(x), dtype=int), TrainConfig(), num_classes=2)


def test_training_is_bit_reproducible():
    x, y = _clusters()
    a = train_features(x, y, TrainConfig(seed=3))
    b = train_features(x, y, TrainConfig(seed=3))
    np.testing.assert_array_equal(a.parameter_vector(), b.parameter_vector())
    c = train_features(x, y, TrainConfig(seed=4))
    assert not np.array_equal(a.parameter_vector(), c.parameter_vector())


def test_diverging_training_reports_epoch():
    x, y = _clusters()
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="epoch 0"):
        train_features(x, y, TrainConfig(initial_lr=1e308))


def test_fine_tune_zero_epochs_is_identity():
    x, y = _clusters()
    m = train_features(x, y, TrainConfig())
    assert fine_tune_features(m, x, y, TrainConfig(epochs=0)) == m


def test_fine_tune_on_own_training_set_does_not_increase_loss():
    x, y = _clusters(sep=1.0)
    m = train_features(x, y, TrainConfig(epochs=3))
    before = mean_loss(m, x, y)
    tuned = fine_tune_features(m, x, y, TrainConfig(seed=9, initial_lr=0.01))
    assert mean_loss(tuned, x, y) <= before


def test_fine_tune_recovers_shifted_domain():
    x, y = _clusters(sep=2.0)
    m = train_features(x, y, TrainConfig())
    shifted = x.copy()
    shifted[:, 0] = 1.25 * shifted[:, 0] + 3.0
    before = np.mean(predict_proba_features(m, shifted).argmax(1) == y)
    tuned = fine_tune_features(m, shifted, y, TrainConfig(seed=5))
    after = np.mean(predict_proba_features(tuned, shifted).argmax(1) == y)
    assert after > before


def test_fine_tune_leaves_input_model_untouched():
    x, y = _clusters()
    m = train_features(x, y, TrainConfig())
    snapshot = m.parameter_vector().copy()
    fine_tune_features(m, x[:20], 1 - y[:20], TrainConfig())
    np.testing.assert_array_equal(m.parameter_vector(), snapshot)


def test_fine_tune_dimension_mismatch():
    x, y = _clusters()
    m = train_features(x, y, TrainConfig())
    with pytest.raises(ValueError):
        fine_tune_features(m, x[:, :3], y, TrainConfig())


def _patch_samples(n=40, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        data = rng.normal(60 + 120 * label, 10, size=(3, 8, 8))
        out.append(LabeledSample(_patch(np.clip(data, 0, 255)), label))
    return out


def test_patch_level_predict_and_embed():
    samples = _patch_samples()
    m = train(samples, TrainConfig(epochs=5, hidden=16), 2)
    p = predict_proba(m, samples[0].patch)
    assert p.shape == (2,) and abs(p.sum() - 1.0) < 1e-6
    e = embed(m, samples[0].patch)
    assert e.shape == (16,) and np.all(np.isfinite(e))
    assert fine_tune(m, samples[:4], TrainConfig(epochs=0)) == m


def test_model_roundtrip(tmp_path):
    samples = _patch_samples()
    m = train(samples, TrainConfig(epochs=3, hidden=8), 2)
    save_model(m, tmp_path / "m.clf")
    back = load_model(tmp_path / "m.clf")
    assert back == m
    assert back.hyper["loss_history"] == m.hyper["loss_history"]


def test_model_format_errors(tmp_path):
    path = tmp_path / "bad.clf"
    path.write_bytes(b"NOPE 1 2 3 4\n{}\n")
    with pytest.raises(ModelFormatError):
        load_model(path)
    m = ClassifierModel(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2), np.zeros(2), np.ones(2))
    save_model(m, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(initial_lr=0.0)
