import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from landtransfer.classifier import TrainConfig, train
from landtransfer.patching import ScaleConfig, extract_training_samples, sliding_candidates
from landtransfer.scene import SceneSpec, synth_scene
from landtransfer.transfer import (
    EmptySurvivorSet,
    PseudoLabeledSample,
    TransferConfig,
    build_finetune_set,
    entropy,
    nearest_indices,
    pseudo_label_arrays,
    rank_and_cap,
    read_audit,
    retrieve_filter,
    select_samples,
)


def _sample(label, ent, emb=(0.0,), index=0):
    return PseudoLabeledSample(None, label, 1.0, ent, np.asarray(emb, dtype=float), index)


def _brute_knn(q, src, k):
    out = []
    for row in q:
        d = [(float(np.sum((row - s) ** 2)), j) for j, s in enumerate(src)]
        out.append([j for _, j in sorted(d)[:k]])
    return np.array(out)


def test_entropy_values():
    assert entropy([1.0, 0.0, 0.0]) == 0.0
    assert entropy([0.25] * 4) == pytest.approx(math.log(4))
    assert entropy([0.5, 0.5]) == pytest.approx(math.log(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 40), st.integers(1, 5), st.integers(0, 1000))
def test_nearest_indices_match_brute_force(nq, ns, k, seed):
    if k > ns:
        return
    rng = np.random.default_rng(seed)
    # integer coordinates give exact ties, which must resolve by index
    q = rng.integers(0, 4, size=(nq, 3)).astype(float)
    src = rng.integers(0, 4, size=(ns, 3)).astype(float)
    np.testing.assert_array_equal(nearest_indices(q, src, k, chunk=7), _brute_knn(q, src, k))


def test_threshold_is_inclusive():
    probs = np.array([[0.8, 0.2], [0.79, 0.21], [0.1, 0.9]])
    kept = pseudo_label_arrays(probs, np.zeros((3, 2)), 0.8)
    assert [s.index for s in kept] == [0, 2]
    assert [s.pseudo_label for s in kept] == [0, 1]


def test_rank_and_cap_orders_by_descending_entropy_with_stable_ties():
    samples = [_sample(0, 0.1, index=0), _sample(0, 0.5, index=1), _sample(1, 0.3, index=2),
               _sample(0, 0.5, index=3), _sample(0, 0.2, index=4)]
    out = rank_and_cap(samples, 2)
    assert [s.index for s in out] == [1, 3, 2]


def test_rank_and_cap_keeps_highest_entropy():
    rng = np.random.default_rng(0)
    samples = [_sample(int(rng.integers(0, 3)), float(rng.uniform()), index=i) for i in range(60)]
    out = rank_and_cap(samples, 5)
    for c in range(3):
        mine = sorted((s.entropy for s in samples if s.pseudo_label == c), reverse=True)
        chosen = [s.entropy for s in out if s.pseudo_label == c]
        assert chosen == mine[:5]


def test_retrieval_requires_unanimous_neighbours():
    src_emb = np.array([[0.0], [0.1], [0.2], [5.0], [5.1]])
    src_lab = np.array([0, 0, 1, 1, 1])
    near_zero = _sample(0, 0.1, [0.0])
    near_five = _sample(1, 0.1, [5.0], index=1)
    assert retrieve_filter([near_zero, near_five], (src_emb, src_lab), 2) == [near_zero, near_five]
    assert retrieve_filter([near_zero, near_five], (src_emb, src_lab), 3) == [near_five]
    pairs = list(zip(src_emb, src_lab))
    assert retrieve_filter([near_zero], pairs, 2) == [near_zero]
    with pytest.raises(ValueError):
        retrieve_filter([near_zero], (src_emb, src_lab), 6)


def _random_selection(sigma, delta, mu, seed=0):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.full(3, 0.4), size=300)
    emb = rng.normal(size=(300, 4))
    src_emb = rng.normal(size=(90, 4))
    src_lab = rng.integers(0, 3, size=90)
    return select_samples(probs, emb, src_emb, src_lab, TransferConfig(sigma, delta, mu))


@pytest.mark.parametrize("seed", range(3))
def test_survivors_shrink_as_sigma_and_delta_grow(seed):
    by_sigma = [{s.index for s in _random_selection(x, 1, 10**6, seed).survivors} for x in (0.5, 0.7, 0.9)]
    assert by_sigma[0] >= by_sigma[1] >= by_sigma[2]
    by_delta = [{s.index for s in _random_selection(0.5, d, 10**6, seed).survivors} for d in (1, 2, 4)]
    assert by_delta[0] >= by_delta[1] >= by_delta[2]


def test_selection_audit_decisions():
    sel = _random_selection(0.7, 2, 3)
    decisions = {r["decision"] for r in sel.audit}
    assert decisions <= {"low_confidence", "capped", "kept", "retrieval_mismatch"}
    kept = [r["index"] for r in sel.audit if r["decision"] == "kept"]
    assert sorted(kept) == sorted(s.index for s in sel.survivors)
    for r in sel.audit:
        if r["decision"] == "low_confidence":
            assert r["confidence"] < 0.7
        if r["decision"] in ("kept", "retrieval_mismatch"):
            assert len(r["neighbors"]) == 2
    per_class = np.bincount([s.pseudo_label for s in sel.survivors], minlength=3)
    assert per_class.max() <= 3


def test_config_validation():
    for bad in (dict(sigma=0.0), dict(sigma=1.1), dict(delta=0), dict(mu=0)):
        with pytest.raises(ValueError):
            TransferConfig(**bad)
    assert TransferConfig(sigma=1.0).sigma == 1.0


@pytest.fixture(scope="module")
def small_world():
    spec = SceneSpec(width=96, height=96, num_classes=2, voronoi_seeds=6, seed=3)
    r, m = synth_scene(spec)
    scales = ScaleConfig((16, 32), 8)
    samples = extract_training_samples(r, m, scales, 30, 0.8, seed=0)
    model = train(samples, TrainConfig(epochs=5, hidden=16), 2)
    target, _ = synth_scene(SceneSpec(width=96, height=96, num_classes=2, voronoi_seeds=6, seed=4))
    return model, samples, sliding_candidates(target, scales)


def test_finetune_set_and_audit_file(small_world, tmp_path):
    model, samples, cands = small_world
    out = build_finetune_set(model, cands, samples, TransferConfig(0.6, 3, 20), tmp_path / "a.jsonl")
    records = read_audit(tmp_path / "a.jsonl")
    assert len(records) == len(cands)
    assert len(out) == sum(r["decision"] == "kept" for r in records)
    assert all(s.patch.pixels.width == 8 for s in out)


def test_unreachable_threshold_raises_empty(small_world, tmp_path):
    model, samples, cands = small_world
    with pytest.raises(EmptySurvivorSet) as exc:
        build_finetune_set(model, cands, samples, TransferConfig(1.0, 3, 20), tmp_path / "a.jsonl")
    assert len(exc.value.audit) == len(cands)
    assert (tmp_path / "a.jsonl").exists()
