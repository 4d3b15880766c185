"""Command-line interface: synth, pretrain, transfer, classify, evaluate, run-all."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .classifier import ModelFormatError, TrainingError, load_model, save_model
from .metrics import EmptyMatrixError, write_report
from .pipeline import (
    ConfigError,
    PipelineConfig,
    collect_source_samples,
    config_text,
    load_config,
    margin_note,
    run_all,
    run_classify,
    run_evaluate,
    run_pretrain,
    run_transfer,
)
from .raster import RasterFormatError, export_mask_image, read_mask, read_raster, write_mask, write_raster
from .scene import synth_scene
from .segmentation import SegmentationFormatError, write_segmentation

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FALLBACK = 0, 1, 2, 3

log = logging.getLogger("landtransfer")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma", type=float, help="pseudo-label confidence threshold")
    p.add_argument("--delta", type=int, help="neighbours that must agree in retrieval")
    p.add_argument("--mu", type=int, help="per-class cap on selected samples")
    p.add_argument("--scales", help="comma-separated window sizes, e.g. 16,32,64")
    p.add_argument("--seg-k", type=float, help="segmentation scale parameter")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args) -> PipelineConfig:
    overrides = {}
    for key, attr in (("seed", "seed"), ("sigma", "sigma"), ("delta", "delta"), ("mu", "mu"), ("scales", "scales"), ("seg_k", "seg_k")):
        value = getattr(args, attr)
        if value is not None:
            overrides[key] = str(value)
    return load_config(args.config, overrides)


def _sources(cfg: PipelineConfig, pairs):
    return [(read_raster(r), read_mask(m)) for r, m in pairs]


def cmd_synth(args, cfg: PipelineConfig) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    for i, spec in enumerate(cfg.source_specs()):
        r, m = synth_scene(spec)
        write_raster(r, os.path.join(args.out_dir, f"source_{i}.mbr"))
        write_mask(m, os.path.join(args.out_dir, f"source_{i}.msk"))
    r, m = synth_scene(cfg.target_spec())
    write_raster(r, os.path.join(args.out_dir, "target.mbr"))
    write_mask(m, os.path.join(args.out_dir, "target_truth.msk"))
    return EXIT_OK


def cmd_pretrain(args, cfg: PipelineConfig) -> int:
    save_model(run_pretrain(cfg, _sources(cfg, args.source)), args.out)
    return EXIT_OK


def cmd_transfer(args, cfg: PipelineConfig) -> int:
    model = load_model(args.model)
    samples = collect_source_samples(cfg, _sources(cfg, args.source))
    outcome = run_transfer(cfg, model, read_raster(args.target), samples, args.audit)
    save_model(outcome.model, args.out)
    print(f"survivors {outcome.survivors}")
    if outcome.fallback:
        print("fallback: no sample survived selection; wrote the input model unchanged", file=sys.stderr)
        return EXIT_FALLBACK
    return EXIT_OK


def cmd_classify(args, cfg: PipelineConfig) -> int:
    model = load_model(args.model)
    target = read_raster(args.target)
    patchwise, final, seg = run_classify(cfg, model, target)
    os.makedirs(args.out_dir, exist_ok=True)
    write_mask(patchwise, os.path.join(args.out_dir, "patchwise.msk"))
    write_mask(final, os.path.join(args.out_dir, "final.msk"))
    write_segmentation(seg, os.path.join(args.out_dir, "segmentation.seg"))
    export_mask_image(final, cfg.legend, os.path.join(args.out_dir, "final.png"))
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    truth, pred = read_mask(args.truth), read_mask(args.pred)
    k = truth.num_classes
    names = cfg.legend.names[:k] if cfg.legend.num_classes >= k else None
    rep = run_evaluate(truth, pred, k, names)
    _, txt_path = write_report(rep, args.out_prefix, margin_note(pred, cfg.scales.cell))
    with open(txt_path, encoding="utf-8") as fh:
        print(fh.read(), end="")
    return EXIT_OK


def cmd_run_all(args, cfg: PipelineConfig) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config_text(cfg))
    result = run_all(cfg, args.out_dir)
    for name, rep in result.reports.items():
        print(f"{name:<14} OA {100 * rep.overall_accuracy:6.2f}  kappa {rep.kappa:.4f}")
    if result.fallback:
        print("fallback: no sample survived selection; fine-tuned model equals the pre-trained one", file=sys.stderr)
        return EXIT_FALLBACK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="landtransfer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic source scenes and a shifted target")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train a classifier on labelled source scenes")
    p.add_argument("--source", nargs=2, action="append", required=True, metavar=("RASTER", "MASK"))
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transfer", help="fine-tune a model on pseudo-labelled target patches")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source", nargs=2, action="append", required=True, metavar=("RASTER", "MASK"))
    p.add_argument("--out", required=True)
    p.add_argument("--audit", help="JSON-lines selection audit to write")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("classify", help="patch-wise map, segmentation and voted final map")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="Kappa, OA and user's accuracy against a truth mask")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-all", help="every stage end to end on synthetic scenes")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_run_all)

    for p in sub.choices.values():
        _add_common(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as exc:
        print(f"landtransfer: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except (RasterFormatError, ModelFormatError, SegmentationFormatError, EmptyMatrixError, TrainingError, OSError, ValueError) as exc:
        print(f"landtransfer: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
