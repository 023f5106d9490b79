"""Command-line entry point: ``spermsdf <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .concordance import ConcordanceError, sdf_difference_stats
from .data import ManifestError, SplitError, class_counts, grouped_split, load_manifest, load_split, save_split
from .metrics import format_report
from .models import DEFAULT_BACKBONE, ModelConfig, Variant
from .morphometry import CalibrationConfig, FeatureTable, extract_batch
from .synth import SynthConfig, generate
from .training import TrainConfig

logger = logging.getLogger("spermsdf")


class CLIError(Exception):
    pass


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{what} not found: {p}")
    return p


def cmd_validate(args):
    manifest = load_manifest(_existing(args.manifest, "manifest"))
    unfrag, frag, null = class_counts(manifest)
    missing = [r.cell_id for r in manifest.records if not Path(r.phase_contrast_path).exists()]
    print(f"{args.manifest}: {len(manifest)} cells, {len(manifest.patients)} patients, "
          f"rounds {', '.join(manifest.rounds) or '-'}")
    print(f"class counts (round {manifest.primary_round}): unfragmented={unfrag} fragmented={frag} null={null}")
    print(f"supervised cells: {unfrag + frag}")
    if missing:
        raise CLIError(f"{len(missing)} phase-contrast image(s) missing, e.g. {missing[:3]}")
    return 0


def cmd_split(args):
    manifest = load_manifest(_existing(args.manifest, "manifest"))
    split = grouped_split(manifest, args.val_patients, args.seed)
    text = json.dumps(split.to_json(), indent=2)
    if args.out:
        save_split(split, args.out)
        print(f"wrote {args.out}: {len(split.train_patients)} train / {len(split.val_patients)} val patients")
    else:
        print(text)
    return 0


def cmd_extract(args):
    manifest = load_manifest(_existing(args.manifest, "manifest"), pixel_scale_um=args.pixel_scale)
    cfg = CalibrationConfig(pixel_scale_um=manifest.pixel_scale_um,
                            segmentation_threshold_quantile=args.threshold_quantile,
                            min_head_area_px=args.min_head_area)
    table = extract_batch(manifest, cfg, n_jobs=args.jobs)
    table.to_csv(args.out)
    print(f"wrote {args.out}: {len(table)} rows, {table.n_failed} segmentation failure(s)")
    return 0


def cmd_train(args):
    from .pipeline import load_run_config, train_run

    manifest = load_manifest(_existing(args.manifest, "manifest"))
    split = load_split(_existing(args.split, "split file"))
    model_cfg, train_cfg = (None, TrainConfig())
    if args.config:
        model_cfg, train_cfg = load_run_config(_existing(args.config, "config"))
    model_cfg = model_cfg or ModelConfig(variant=Variant(args.variant))
    model_cfg = replace(model_cfg, variant=Variant(args.variant))
    if args.backbone:
        model_cfg = replace(model_cfg, backbone_id=args.backbone)
    if args.no_pretrained:
        model_cfg = replace(model_cfg, pretrained=False)
    overrides = {k: v for k, v in (("max_epochs", args.max_epochs), ("seed", args.seed),
                                   ("batch_size", args.batch_size)) if v is not None}
    train_cfg = replace(train_cfg, **overrides).with_env_seed()
    features = None
    if model_cfg.variant.uses_features:
        if not args.features:
            raise CLIError(f"--features is required for the {model_cfg.variant.value} variant")
        features = FeatureTable.read_csv(_existing(args.features, "feature table"))
    est = train_run(manifest, split, features, model_cfg, train_cfg, args.out,
                    manifest_path=args.manifest, features_path=args.features)
    print(f"wrote {args.out}: best epoch {est.best_epoch_} (val loss {est.best_val_loss_:.4f}) "
          f"after {len(est.logs_)} epoch(s)")
    return 0


def cmd_evaluate(args):
    from .pipeline import evaluate_run

    manifest = load_manifest(_existing(args.manifest, "manifest"))
    split = load_split(_existing(args.split, "split file"))
    _existing(Path(args.run) / "best", "run checkpoint")
    features = FeatureTable.read_csv(_existing(args.features, "feature table")) if args.features else None
    rep = evaluate_run(args.run, manifest, split, args.out, features=features, threshold=args.threshold)
    print(format_report(rep))
    print(f"wrote {args.out}/report.json")
    return 0


def cmd_predict(args):
    from .pipeline import predict_images

    _existing(Path(args.run) / "best", "run checkpoint")
    _existing(args.images, "image directory")
    out = predict_images(args.run, args.images, args.out, threshold=args.threshold,
                         pixel_scale_um=args.pixel_scale)
    print(f"wrote {out}")
    return 0


def cmd_concordance(args):
    manifest = load_manifest(_existing(args.manifest, "manifest"))
    round_a, round_b = args.rounds
    rep = sdf_difference_stats(manifest, round_a, round_b, three_way=not args.two_way)
    print(rep.table())
    out = Path(args.out) if args.out else Path(args.manifest).with_name("concordance.json")
    rep.write(out)
    print(f"wrote {out}")
    return 0


def cmd_synth(args):
    cfg = SynthConfig()
    if args.config:
        cfg = SynthConfig.from_json(json.loads(_existing(args.config, "synth config").read_text(encoding="utf-8")))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    manifest = generate(cfg, args.out)
    unfrag, frag, null = class_counts(manifest)
    print(f"wrote {args.out}/manifest.jsonl: {len(manifest)} cells, {cfg.n_patients} patients "
          f"({frag} fragmented, {unfrag} unfragmented, {null} null)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spermsdf", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("validate", help="check a manifest and print class counts")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("split", help="patient-grouped train/validation split")
    p.add_argument("manifest")
    p.add_argument("--val-patients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="split JSON path (default: print)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("extract", help="measure head morphometry for every cell")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="feature CSV path")
    p.add_argument("--pixel-scale", type=float, help="microns per pixel (overrides manifest)")
    p.add_argument("--threshold-quantile", type=float, default=0.5)
    p.add_argument("--min-head-area", type=int, default=50)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="fit one model variant")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--features", help="feature CSV (morphology and ensemble variants)")
    p.add_argument("--variant", choices=[v.value for v in Variant], required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON with 'model' and/or 'train' sections")
    p.add_argument("--backbone", help=f"backbone id (default {DEFAULT_BACKBONE})")
    p.add_argument("--no-pretrained", action="store_true", help="random backbone initialisation")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="report, ROC and plots for a run on its validation patients")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--features", help="feature CSV (default: the one used for training)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="per-cell probabilities for a directory of crops")
    p.add_argument("--run", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pixel-scale", type=float)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("concordance", help="agreement between two annotation rounds")
    p.add_argument("manifest")
    p.add_argument("--rounds", nargs=2, required=True, metavar=("A", "B"))
    p.add_argument("--two-way", action="store_true", help="exclude cells null in either round")
    p.add_argument("--out", help="concordance JSON path (default: next to the manifest)")
    p.set_defaults(func=cmd_concordance)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ManifestError, SplitError, ConcordanceError, ValueError, OSError, KeyError) as exc:
        print(f"spermsdf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
