"""Command-line entry point: ``sarmatch {synth,train,match,eval,selftest}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .checkpoint import parse_kv
from .data import ImagePair, load_image, load_manifest, load_pair, write_synthetic_dataset
from .fftncc import save_heatmap, save_heatmap_pgm
from .metrics import compute_metrics
from .model import ModelConfig
from .train import TrainConfig, evaluate, fit, infer, load_matcher

log = logging.getLogger("sarmatch")

GLOBAL_DEFAULTS = {
    "seed": None,
    "config": None,
    "ncc_mode": None,
    "pseudo_mode": None,
    "blocks_n": None,
    "labeled_ratio": None,
    "joint_step": False,
    "shallow_only": False,
    "no_enhance": False,
    "metric_mode": "mean",
    "verbose": False,
}


def _global_flags() -> argparse.ArgumentParser:
    # defaults are suppressed so a flag given before the subcommand is not reset after it
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="random seed")
    p.add_argument("--config", type=Path, default=S, help="key=value file of model and train.* settings")
    p.add_argument("--ncc-mode", choices=["joint", "per_channel"], default=S)
    p.add_argument("--pseudo-mode", choices=["hard", "soft"], default=S)
    p.add_argument("--blocks-n", type=int, default=S, help="enhancement blocks per level")
    p.add_argument("--labeled-ratio", default=S, help="labeled:unlabeled batches per cycle, e.g. 1:15")
    p.add_argument("--joint-step", action="store_true", default=S)
    p.add_argument("--shallow-only", action="store_true", default=S, help="skip the deep level and fusion")
    p.add_argument("--no-enhance", action="store_true", default=S, help="disable feature enhancement")
    p.add_argument("--metric-mode", choices=["mean", "rms"], default=S)
    p.add_argument("-v", "--verbose", action="store_true", default=S)
    return p


def build_parser() -> argparse.ArgumentParser:
    flags = _global_flags()
    parser = argparse.ArgumentParser(prog="sarmatch", parents=[flags],
                                     description="Semi-supervised SAR-optical template matching.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[flags], help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--template-size", type=int, default=48)
    p.add_argument("--gap", choices=["none", "mild", "harsh"], default="mild")
    p.add_argument("--labeled-fraction", type=float, default=0.0625)

    p = sub.add_parser("train", parents=[flags], help="fit a model on a manifest")
    p.add_argument("--train", type=Path, required=True, help="training manifest")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--val", type=Path, help="validation manifest with offsets")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--template-size", type=int, help="crop size for aligned (uncut) pairs")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("match", parents=[flags], help="locate one template")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--optical", type=Path, required=True)
    p.add_argument("--sar", type=Path, required=True)
    p.add_argument("--export", type=Path, help="directory for .hmp and .pgm heatmaps")

    p = sub.add_parser("eval", parents=[flags], help="score a model or a predictions file")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--predictions", type=Path, help="CSV of pred_row,pred_col,gt_row,gt_col")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--out", type=Path, help="also write the report here")

    p = sub.add_parser("selftest", parents=[flags], help="run the built-in oracle checks")
    p.add_argument("--quick", action="store_true", help="skip the slower checks")
    return parser


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    kv = parse_kv(args.config.read_text()) if args.config else {}
    model_cfg = ModelConfig.from_kv(kv)
    train_cfg = TrainConfig.from_kv(kv)
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.pseudo_mode:
        train_cfg.pseudo_mode = args.pseudo_mode
    if args.labeled_ratio:
        train_cfg.labeled_ratio = args.labeled_ratio
    if args.joint_step:
        train_cfg.joint_step = True
    _apply_model_flags(model_cfg, args)
    TrainConfig(**vars(train_cfg))  # re-validate after overrides
    return model_cfg, train_cfg


def _apply_model_flags(cfg: ModelConfig, args) -> None:
    if args.ncc_mode:
        cfg.ncc_mode = args.ncc_mode
    if args.blocks_n is not None:
        if args.blocks_n < 0:
            raise ValueError(f"--blocks-n must be >= 0, got {args.blocks_n}")
        cfg.set_blocks(args.blocks_n)
    if args.no_enhance:
        cfg.set_blocks(0)
    if args.shallow_only:
        cfg.shallow_only = True


def _load_pairs(manifest_path) -> list:
    return [load_pair(e) for e in load_manifest(manifest_path).entries]


def cmd_synth(args) -> int:
    paths = write_synthetic_dataset(args.out, args.n_train, args.n_test, args.size, args.template_size,
                                    args.gap, args.labeled_fraction, args.seed or 0)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs(args)
    for name in ("epochs", "lr", "batch_size", "template_size", "checkpoint_every"):
        value = getattr(args, name)
        if value is not None:
            setattr(train_cfg, name, value)
    train_cfg = TrainConfig(**vars(train_cfg))
    pairs = _load_pairs(args.train)
    labeled = [p for p in pairs if p.labeled]
    unlabeled = [p for p in pairs if not p.labeled]
    if not labeled:
        raise ValueError(f"{args.train}: no labeled entries")
    val = None
    if args.val:
        val = [p for p in _load_pairs(args.val) if isinstance(p, ImagePair) and p.gt_offset is not None]
    log.info("training on %d labeled and %d unlabeled pairs", len(labeled), len(unlabeled))
    result = fit(labeled, unlabeled, train_cfg, model_cfg, val=val, run_dir=args.out, resume=args.resume)
    summary = {"checkpoint": str(result.checkpoint), "steps": len(result.steps),
               "final_semi_total": result.final_semi_total}
    if result.validation:
        summary["validation"] = result.validation[-1]
    print(json.dumps(summary, indent=2))
    return 0


def _load_model(args):
    """Trained model; only switches that need no retraining apply here."""
    model = load_matcher(args.checkpoint)
    if args.ncc_mode:
        model.config.ncc_mode = args.ncc_mode
    if args.shallow_only:
        model.config.shallow_only = True
    if args.no_enhance:
        model.enhance_deep = model.enhance_shallow = None
    return model


def cmd_match(args) -> int:
    model = _load_model(args)
    pair = ImagePair(load_image(args.optical), load_image(args.sar))
    result = infer(pair, model, shallow_only=args.shallow_only)
    out = {"offset": list(result.predicted_offset), "peak": result.peak_score,
           "elapsed_ms": result.elapsed_ms, "feature_ms": result.feature_ms,
           "correlation_ms": result.correlation_ms}
    if args.export:
        args.export.mkdir(parents=True, exist_ok=True)
        for name, hm in result.heatmaps.items():
            save_heatmap(args.export / f"{name}.hmp", hm)
            save_heatmap_pgm(args.export / f"{name}.pgm", hm)
        out["export"] = str(args.export)
    print(json.dumps(out, indent=2))
    return 0


def read_predictions(path) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    preds = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"pred_row", "pred_col", "gt_row", "gt_col"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                preds.append(((float(row["pred_row"]), float(row["pred_col"])),
                              (float(row["gt_row"]), float(row["gt_col"]))))
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: malformed line") from None
    return preds


def cmd_eval(args) -> int:
    if args.predictions:
        report = compute_metrics(read_predictions(args.predictions), metric_mode=args.metric_mode)
    elif args.checkpoint and args.manifest:
        model = _load_model(args)
        pairs = _load_pairs(args.manifest)
        if any(not isinstance(p, ImagePair) or p.gt_offset is None for p in pairs):
            raise ValueError(f"{args.manifest}: every entry needs a cut template and an offset")
        report = evaluate(model, pairs, args.batch_size, args.shallow_only, args.metric_mode)
    else:
        raise ValueError("eval needs --predictions, or --checkpoint with --manifest")
    text = report.to_json()
    if args.out:
        args.out.write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return run_selftest(quick=args.quick)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "match": cmd_match, "eval": cmd_eval,
            "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"sarmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
