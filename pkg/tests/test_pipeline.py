import dataclasses
import hashlib

import numpy as np
import pytest

from landtransfer.classifier import TrainConfig
from landtransfer.metrics import overall_accuracy, confusion, read_report_csv
from landtransfer.patching import ScaleConfig
from landtransfer.pipeline import (
    ConfigError,
    PipelineConfig,
    apply_config,
    collect_source_samples,
    config_text,
    load_config,
    margin_note,
    parse_config_text,
    run_all,
    run_classify,
    run_evaluate,
    run_pretrain,
    run_transfer,
    stage_seed,
)
from landtransfer.raster import LabelMask, MultibandRaster
from landtransfer.scene import synth_scene
from landtransfer.segmentation import SegConfig
from landtransfer.transfer import TransferConfig


def _small(seed=0, **kw):
    cfg = PipelineConfig(
        seed=seed,
        scales=ScaleConfig((8, 16, 32), 16),
        train=TrainConfig(epochs=8, hidden=32),
        finetune=TrainConfig(epochs=8, hidden=32),
        samples_per_class=40,
        source_scenes=2,
        seg=SegConfig(min_region=20),
    )
    cfg = dataclasses.replace(cfg, scene=dataclasses.replace(cfg.scene, width=96, height=96, voronoi_seeds=8))
    return dataclasses.replace(cfg, **kw)


def test_stage_seed_rule():
    digest = hashlib.sha256(b"7:pretrain").digest()
    assert stage_seed(7, "pretrain") == int.from_bytes(digest[:8], "little") & (2**63 - 1)
    assert stage_seed(7, "pretrain") != stage_seed(7, "finetune")
    assert stage_seed(7, "pretrain") != stage_seed(8, "pretrain")
    assert 0 <= stage_seed(123, "x") < 2**63


def test_scene_specs_share_design_but_not_seeds():
    cfg = PipelineConfig(seed=4)
    specs = cfg.source_specs()
    assert len({s.seed for s in specs} | {cfg.target_spec().seed}) == cfg.source_scenes + 1
    assert all(not s.shifted for s in specs)
    assert cfg.target_spec().gain == (1.25,) * 3 and cfg.target_spec().offset == (20.0,) * 3


def test_parse_config_text():
    text = "# header\nseed = 5  # trailing\n\nsigma=0.7\nscales = 8,16\n"
    assert parse_config_text(text) == {"seed": "5", "sigma": "0.7", "scales": "8,16"}
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("bogus = 1")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("seed = 1\nno equals sign")


def test_apply_config_sections():
    cfg = apply_config(PipelineConfig(), {"sigma": "0.7", "scales": "8,16", "seg_k": "100", "lr": "0.05"})
    assert cfg.transfer.sigma == 0.7
    assert cfg.scales.scales == (8, 16)
    assert cfg.seg.k_scale == 100.0
    assert cfg.train.initial_lr == 0.05
    with pytest.raises(ConfigError):
        apply_config(PipelineConfig(), {"sigma": "high"})
    with pytest.raises(ConfigError):
        apply_config(PipelineConfig(), {"sigma": "1.5"})


def test_config_text_roundtrip(tmp_path):
    cfg = apply_config(PipelineConfig(), {"seed": "11", "delta": "3", "class_means": "1,2,3;4,5,6;7,8,9;10,11,12"})
    path = tmp_path / "c.txt"
    path.write_text(config_text(cfg))
    assert load_config(path) == cfg
    assert load_config(path, {"seed": "12"}).seed == 12


def test_num_classes_change_resets_legend():
    cfg = apply_config(PipelineConfig(), {"num_classes": "2"})
    assert cfg.legend.num_classes == 2 and cfg.scene.num_classes == 2


def test_empty_source_list_is_error():
    with pytest.raises(ValueError):
        collect_source_samples(_small(), [])
    with pytest.raises(ValueError):
        run_pretrain(_small(), [])


def test_class_count_mismatch_is_error():
    cfg = _small()
    r, m = synth_scene(cfg.source_specs()[0])
    with pytest.raises(ValueError):
        collect_source_samples(apply_config(cfg, {"num_classes": "5"}), [(r, m)])


@pytest.fixture(scope="module")
def small_run():
    cfg = _small()
    scenes = [synth_scene(s) for s in cfg.source_specs()]
    samples = collect_source_samples(cfg, scenes)
    return cfg, scenes, samples, run_pretrain(cfg, scenes, samples)


def test_pretrain_is_deterministic(small_run):
    cfg, scenes, samples, model = small_run
    again = run_pretrain(cfg, scenes, samples)
    np.testing.assert_array_equal(again.parameter_vector(), model.parameter_vector())


def test_unreachable_sigma_takes_fallback(small_run):
    cfg, scenes, samples, model = small_run
    target, _ = synth_scene(cfg.target_spec())
    cfg = dataclasses.replace(cfg, transfer=TransferConfig(sigma=1.0, delta=5, mu=50))
    outcome = run_transfer(cfg, model, target, samples)
    assert outcome.fallback and outcome.survivors == 0
    assert outcome.model is model


def test_unshifted_target_keeps_accuracy():
    diffs = []
    for seed in (0, 1):
        cfg = _small(seed, target_gain=(1.0,), target_offset=(0.0,))
        scenes = [synth_scene(s) for s in cfg.source_specs()]
        samples = collect_source_samples(cfg, scenes)
        model = run_pretrain(cfg, scenes, samples)
        target, truth = synth_scene(cfg.target_spec())
        outcome = run_transfer(cfg, model, target, samples)
        assert not outcome.fallback and outcome.survivors > 0
        accs = [overall_accuracy(confusion(truth, run_classify(cfg, m, target)[1], 4)) for m in (model, outcome.model)]
        diffs.append(accs[1] - accs[0])
    assert abs(np.mean(diffs)) <= 0.02


def test_two_class_source_validates_above_095():
    cfg = _small(3, num_classes=2)
    cfg = dataclasses.replace(cfg, scene=dataclasses.replace(cfg.scene, class_means=((60.0, 60.0, 60.0), (180.0, 180.0, 180.0))))
    model = run_pretrain(cfg, [synth_scene(s) for s in cfg.source_specs()])
    held_out, truth = synth_scene(dataclasses.replace(cfg.source_specs()[0], seed=999))
    patchwise, _, _ = run_classify(cfg, model, held_out)
    assert overall_accuracy(confusion(truth, patchwise, 2)) >= 0.95


def test_constant_scene_gives_constant_final_map(small_run):
    cfg, _, _, model = small_run
    flat = MultibandRaster(np.full((3, 96, 96), 60.0))
    patchwise, final, seg = run_classify(cfg, model, flat)
    assert seg.region_count == 1
    assert len(np.unique(final.labels)) == 1


def test_final_map_is_constant_on_regions(small_run):
    cfg, _, _, model = small_run
    target, _ = synth_scene(cfg.target_spec())
    _, final, seg = run_classify(cfg, model, target)
    for rid in range(seg.region_count):
        assert len(np.unique(final.labels[seg.region_ids == rid])) == 1


def test_evaluate_perfect_prediction():
    truth = LabelMask(np.array([[0, 1], [2, 1]]), 3)
    rep = run_evaluate(truth, truth, 3)
    assert rep.kappa == 1.0 and rep.overall_accuracy == 1.0


def test_margin_note():
    assert margin_note(LabelMask(np.zeros((32, 32)), 2), 16) is None
    assert "2 right and 0 bottom" in margin_note(LabelMask(np.zeros((32, 34)), 2), 16)


def test_run_all_writes_every_artifact(tmp_path):
    result = run_all(_small(), tmp_path)
    for name in ("source_0.mbr", "target.mbr", "target_truth.msk", "pretrained.clf", "finetuned.clf",
                 "transfer_audit.jsonl", "segmentation.seg", "ft_final.msk", "pt_final.png", "ft_final_report.csv"):
        assert (tmp_path / name).exists(), name
    parsed = read_report_csv(tmp_path / "ft_final_report.csv")
    assert parsed["oa"] == pytest.approx(result.reports["ft_final"].overall_accuracy)
