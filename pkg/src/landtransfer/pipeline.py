"""Pipeline configuration and the pretrain / transfer / classify / evaluate stages."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

from .classifier import ClassifierModel, TrainConfig, fine_tune, save_model, train
from .fusion import classify_map
from .metrics import MetricReport, confusion, report_from_confusion, write_report
from .patching import LabeledSample, ScaleConfig, extract_training_samples, sliding_candidates
from .raster import ColorLegend, LabelMask, MultibandRaster, default_legend, export_mask_image, write_mask, write_raster
from .scene import SceneSpec, synth_scene
from .segmentation import SegConfig, Segmentation, segment, write_segmentation
from .transfer import EmptySurvivorSet, TransferConfig, build_finetune_set
from .voting import majority_vote

log = logging.getLogger(__name__)


def stage_seed(seed: int, stage: str) -> int:
    """Derive a per-stage seed: first 8 bytes of ``sha256(f"{seed}:{stage}")``, little-endian, masked to 63 bits."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


# Chroma-separated classes with a shared oriented texture: a gain and offset
# shift moves colours enough to confuse a source-trained model, while the
# texture cue survives it and lets confident target patches be mined.
DEFAULT_SCENE = SceneSpec(
    class_means=((100.0, 20.0, 60.0), (20.0, 100.0, 60.0), (60.0, 100.0, 20.0), (60.0, 20.0, 100.0)),
    texture_freq=(0.1,) * 4,
    texture_amp=(25.0,) * 4,
    region_jitter=5.0,
)


@dataclass(frozen=True)
class PipelineConfig:
    num_classes: int = 4
    seed: int = 0
    scales: ScaleConfig = field(default_factory=ScaleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferConfig = field(default_factory=lambda: TransferConfig(sigma=0.8, delta=5, mu=50))
    seg: SegConfig = field(default_factory=SegConfig)
    samples_per_class: int = 100
    purity: float = 0.8
    source_scenes: int = 3
    scene: SceneSpec = DEFAULT_SCENE
    target_gain: tuple = (1.25,)
    target_offset: tuple = (20.0,)
    legend: ColorLegend | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.source_scenes < 1:
            raise ValueError("source_scenes must be >= 1")
        if self.scene.num_classes != self.num_classes:
            object.__setattr__(self, "scene", dataclasses.replace(self.scene, num_classes=self.num_classes))
        if self.legend is None:
            object.__setattr__(self, "legend", default_legend(self.num_classes))
        elif self.legend.num_classes < self.num_classes:
            raise ValueError("legend does not cover every class")

    def source_specs(self) -> list[SceneSpec]:
        return [
            dataclasses.replace(self.scene, seed=stage_seed(self.seed, f"source-scene-{i}"), gain=(1.0,), offset=(0.0,))
            for i in range(self.source_scenes)
        ]

    def target_spec(self) -> SceneSpec:
        return dataclasses.replace(
            self.scene, seed=stage_seed(self.seed, "target-scene"), gain=self.target_gain, offset=self.target_offset
        )


class ConfigError(ValueError):
    """Unknown key or unparsable value in a pipeline configuration."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _rows(text: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(row) for row in text.split(";"))


# key -> (section, field, parser); section "" is PipelineConfig itself
CONFIG_SCHEMA = {
    "seed": ("", "seed", int),
    "num_classes": ("", "num_classes", int),
    "samples_per_class": ("", "samples_per_class", int),
    "purity": ("", "purity", float),
    "source_scenes": ("", "source_scenes", int),
    "target_gain": ("", "target_gain", _floats),
    "target_offset": ("", "target_offset", _floats),
    "scales": ("scales", "scales", _ints),
    "canonical_size": ("scales", "canonical_size", int),
    "batch_size": ("train", "batch_size", int),
    "epochs": ("train", "epochs", int),
    "momentum": ("train", "momentum", float),
    "lr": ("train", "initial_lr", float),
    "lr_drop": ("train", "lr_drop_factor", float),
    "patience": ("train", "plateau_patience", int),
    "hidden": ("train", "hidden", int),
    "ft_batch_size": ("finetune", "batch_size", int),
    "ft_epochs": ("finetune", "epochs", int),
    "ft_lr": ("finetune", "initial_lr", float),
    "sigma": ("transfer", "sigma", float),
    "delta": ("transfer", "delta", int),
    "mu": ("transfer", "mu", int),
    "seg_k": ("seg", "k_scale", float),
    "min_region": ("seg", "min_region", int),
    "merge_stop": ("seg", "merge_stop", float),
    "w_color": ("seg", "w_color", float),
    "w_texture": ("seg", "w_texture", float),
    "w_size": ("seg", "w_size", float),
    "w_fill": ("seg", "w_fill", float),
    "width": ("scene", "width", int),
    "height": ("scene", "height", int),
    "bands": ("scene", "bands", int),
    "noise_std": ("scene", "noise_std", float),
    "voronoi_seeds": ("scene", "voronoi_seeds", int),
    "region_jitter": ("scene", "region_jitter", float),
    "illumination": ("scene", "illumination", float),
    "class_means": ("scene", "class_means", _rows),
    "texture_freq": ("scene", "texture_freq", _floats),
    "texture_amp": ("scene", "texture_amp", _floats),
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def apply_config(cfg: PipelineConfig, values: dict[str, str]) -> PipelineConfig:
    """Return ``cfg`` with the textual ``values`` applied; an explicit ``num_classes`` resets the legend."""
    changes: dict[str, dict] = {}
    for key, text in values.items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        section, name, parser = CONFIG_SCHEMA[key]
        try:
            changes.setdefault(section, {})[name] = parser(str(text))
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
    top = changes.pop("", {})
    try:
        for section, fields in changes.items():
            top[section] = dataclasses.replace(getattr(cfg, section), **fields)
        if "num_classes" in top:
            top.setdefault("legend", None)
        return dataclasses.replace(cfg, **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | os.PathLike | None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    values: dict[str, str] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    values.update(overrides or {})
    return apply_config(PipelineConfig(), values)


def _format(v) -> str:
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ";".join(_format(row) for row in v)
        return ",".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_text(cfg: PipelineConfig) -> str:
    """Serialise every schema key; ``parse_config_text`` reads it back to an equal config."""
    lines = []
    for key, (section, name, _) in CONFIG_SCHEMA.items():
        obj = cfg if not section else getattr(cfg, section)
        lines.append(f"{key} = {_format(getattr(obj, name))}")
    return "\n".join(lines) + "\n"


def collect_source_samples(cfg: PipelineConfig, scenes: Sequence[tuple[MultibandRaster, LabelMask]]) -> list[LabeledSample]:
    if not scenes:
        raise ValueError("at least one source scene is required")
    samples: list[LabeledSample] = []
    for i, (r, m) in enumerate(scenes):
        if m.num_classes != cfg.num_classes:
            raise ValueError(f"source scene {i} has {m.num_classes} classes, config expects {cfg.num_classes}")
        seed = stage_seed(cfg.seed, f"samples-{i}")
        samples.extend(extract_training_samples(r, m, cfg.scales, cfg.samples_per_class, cfg.purity, seed))
    return samples


def run_pretrain(
    cfg: PipelineConfig,
    scenes: Sequence[tuple[MultibandRaster, LabelMask]],
    samples: Sequence[LabeledSample] | None = None,
) -> ClassifierModel:
    if samples is None:
        samples = collect_source_samples(cfg, scenes)
    tcfg = dataclasses.replace(cfg.train, seed=stage_seed(cfg.seed, "pretrain") % (2**32))
    return train(samples, tcfg, cfg.num_classes)


@dataclass
class TransferOutcome:
    model: ClassifierModel
    fallback: bool
    survivors: int


def run_transfer(
    cfg: PipelineConfig,
    model: ClassifierModel,
    target: MultibandRaster,
    source_samples: Sequence[LabeledSample],
    audit_path: str | os.PathLike | None = None,
) -> TransferOutcome:
    """Mine pseudo-labelled target samples and fine-tune; fall back to ``model`` if none survive."""
    candidates = sliding_candidates(target, cfg.scales)
    try:
        selected = build_finetune_set(model, candidates, source_samples, cfg.transfer, audit_path)
    except EmptySurvivorSet:
        log.warning("no pseudo-labelled sample survived; keeping the pre-trained model")
        return TransferOutcome(model, True, 0)
    fcfg = dataclasses.replace(cfg.finetune, seed=stage_seed(cfg.seed, "finetune") % (2**32))
    return TransferOutcome(fine_tune(model, selected, fcfg), False, len(selected))


def run_classify(
    cfg: PipelineConfig,
    model: ClassifierModel,
    target: MultibandRaster,
    seg: Segmentation | None = None,
) -> tuple[LabelMask, LabelMask, Segmentation]:
    """Patch-wise map, majority-voted final map, and the segmentation used."""
    patchwise = classify_map(model, target, cfg.scales)
    if seg is None:
        seg = segment(target, cfg.seg)
    return patchwise, majority_vote(patchwise, seg), seg


def run_evaluate(truth: LabelMask, pred: LabelMask, num_classes: int, class_names: Sequence[str] | None = None) -> MetricReport:
    return report_from_confusion(confusion(truth, pred, num_classes), class_names)


def margin_note(mask: LabelMask, cell: int) -> str | None:
    w, h = mask.width, mask.height
    if w % cell == 0 and h % cell == 0:
        return None
    return f"note: {w % cell} right and {h % cell} bottom margin pixels lie outside full grid cells and are BACKGROUND"


@dataclass
class RunAllResult:
    reports: dict
    fallback: bool
    paths: dict


def run_all(cfg: PipelineConfig, work_dir: str | os.PathLike) -> RunAllResult:
    """Synthesise scenes, pretrain, transfer, classify with both models and evaluate."""
    os.makedirs(work_dir, exist_ok=True)
    p = lambda name: os.path.join(work_dir, name)  # noqa: E731
    scenes = [synth_scene(spec) for spec in cfg.source_specs()]
    for i, (r, m) in enumerate(scenes):
        write_raster(r, p(f"source_{i}.mbr"))
        write_mask(m, p(f"source_{i}.msk"))
    target, truth = synth_scene(cfg.target_spec())
    write_raster(target, p("target.mbr"))
    write_mask(truth, p("target_truth.msk"))

    samples = collect_source_samples(cfg, scenes)
    pretrained = run_pretrain(cfg, scenes, samples)
    save_model(pretrained, p("pretrained.clf"))
    outcome = run_transfer(cfg, pretrained, target, samples, p("transfer_audit.jsonl"))
    save_model(outcome.model, p("finetuned.clf"))

    seg = segment(target, cfg.seg)
    write_segmentation(seg, p("segmentation.seg"))
    reports = {}
    names = cfg.legend.names[: cfg.num_classes]
    for tag, model in (("pt", pretrained), ("ft", outcome.model)):
        patchwise, final, _ = run_classify(cfg, model, target, seg)
        write_mask(patchwise, p(f"{tag}_patchwise.msk"))
        write_mask(final, p(f"{tag}_final.msk"))
        export_mask_image(final, cfg.legend, p(f"{tag}_final.png"))
        for kind, mask in (("patchwise", patchwise), ("final", final)):
            rep = run_evaluate(truth, mask, cfg.num_classes, names)
            write_report(rep, p(f"{tag}_{kind}_report"), margin_note(mask, cfg.scales.cell))
            reports[f"{tag}_{kind}"] = rep
    return RunAllResult(reports, outcome.fallback, {"work_dir": os.fspath(work_dir)})
