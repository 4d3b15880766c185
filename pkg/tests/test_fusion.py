import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from landtransfer.classifier import TrainConfig, train
from landtransfer.fusion import (
    decide,
    fuse,
    fuse_batch,
    specificity_weight,
    specificity_weights,
    classify_map,
)
from landtransfer.patching import ScaleConfig, extract_training_samples, grid_partition
from landtransfer.raster import BACKGROUND
from landtransfer.scene import SceneSpec, synth_scene


def _hand_weight(p):
    q = sorted(p, reverse=True)
    return sum((q[k - 1] - q[k]) / k for k in range(1, len(q)))


def test_weight_examples():
    assert specificity_weight(np.full(4, 0.25)) == pytest.approx(0.0)
    assert specificity_weight(np.array([0.0, 1.0, 0.0])) == pytest.approx(1.0)
    assert specificity_weight(np.array([0.5, 0.3, 0.2])) == pytest.approx(0.25, abs=1e-12)
    assert specificity_weight(np.array([0.2, 0.5, 0.3])) == pytest.approx(0.25, abs=1e-12)


def test_weights_on_random_simplex_points():
    rng = np.random.default_rng(0)
    for k in (2, 3, 5, 8):
        p = rng.dirichlet(np.ones(k), size=2500)
        w = specificity_weights(p)
        assert np.all((w >= 0) & (w <= 1))
        np.testing.assert_allclose(w[:50], [_hand_weight(row) for row in p[:50]], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=7))
def test_weights_are_permutation_invariant(raw):
    p = np.asarray(raw) + 1e-3
    p /= p.sum()
    assert specificity_weight(p) == pytest.approx(specificity_weight(p[::-1]), abs=1e-12)


def test_fusion_is_weighted_mean():
    a = np.array([0.9, 0.1])
    b = np.array([0.4, 0.6])
    wa, wb = specificity_weight(a), specificity_weight(b)
    expected = (wa * a + wb * b) / (wa + wb)
    f = fuse([a, b])
    np.testing.assert_allclose(f.probs, expected)
    assert not f.uniform_fallback
    assert f.probs.sum() == pytest.approx(1.0)


def test_confident_scale_dominates():
    f = fuse([np.array([1.0, 0.0, 0.0]), np.full(3, 1 / 3)])
    np.testing.assert_allclose(f.probs, [1.0, 0.0, 0.0])


def test_all_uniform_falls_back_to_mean():
    f = fuse([np.full(3, 1 / 3), np.full(3, 1 / 3)])
    assert f.uniform_fallback
    np.testing.assert_allclose(f.probs, 1 / 3)
    fused, flags = fuse_batch(np.stack([np.full((2, 2), 0.5), [[1.0, 0.0], [0.5, 0.5]]]))
    np.testing.assert_array_equal(flags, [True, False])
    np.testing.assert_allclose(fused[1], [1.0, 0.0])


def test_single_scale_is_identity():
    p = np.array([0.2, 0.7, 0.1])
    np.testing.assert_allclose(fuse([p]).probs, p)


def test_decide_ties_go_low():
    assert decide(np.array([0.4, 0.4, 0.2])) == 0
    assert decide(np.array([0.1, 0.45, 0.45])) == 1


def test_shape_validation():
    with pytest.raises(ValueError):
        fuse(np.zeros(3))
    with pytest.raises(ValueError):
        fuse_batch(np.zeros((2, 3)))


def test_classify_map_covers_cells_and_leaves_margins():
    spec = SceneSpec(width=70, height=52, num_classes=2, voronoi_seeds=4, seed=1)
    r, m = synth_scene(spec)
    cfg = ScaleConfig((8, 16), 8)
    model = train(extract_training_samples(r, m, cfg, 20, 0.8), TrainConfig(epochs=3, hidden=8), 2)
    out = classify_map(model, r, cfg)
    assert (out.width, out.height) == (70, 52)
    assert np.all(out.labels[:48, :64] != BACKGROUND)
    assert np.all(out.labels[48:, :] == BACKGROUND) and np.all(out.labels[:, 64:] == BACKGROUND)
    cells = grid_partition(r, cfg)
    for p in cells[:5]:
        x, y = p.origin
        assert len(np.unique(out.labels[y : y + 8, x : x + 8])) == 1
