"""Command line driver.

Subcommands: gen-data, train, eval, viz, branch-out, ablate, shuffle.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .attention import export_heatmap, holistic_attention_map, partial_attention_map
from .errors import UsageError
from .evaluation import evaluate, occlusion_eval, write_report_csv
from .experiments import (SUITES, ablate, branch_out, decoupling_score,
                          shuffle_probe, shuffle_ratio, write_shuffle_csv)
from .model import load_model
from .synthdata import load_sample, make_dataset, read_manifest
from .training import TrainConfig, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="attnreid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--ids", type=int, default=64)
    p.add_argument("--per-id", type=int, default=20)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--resume", help="checkpoint with optimizer state")

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--occlude-fraction", type=float)
    p.add_argument("--occlude-side", default="bottom",
                   choices=("top", "bottom", "left", "right"))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("viz", help="holistic and per-group attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--layer", default="block1", choices=("block1", "block4"))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("branch-out", help="write branch predictions vs ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    p.add_argument("--config", help="base training config file")
    p.add_argument("--seed", type=int, help="single seed shorthand")

    p = sub.add_parser("shuffle", help="1x1-head shuffle probe on a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return TrainConfig.from_text(p.read_text())


def _load_split(data_dir, name):
    root = Path(data_dir)
    manifest = root / f"{name}.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    return [load_sample(root, e) for e in read_manifest(manifest)]


def _cmd_gen_data(args) -> int:
    counts = make_dataset(args.ids, args.per_id, args.cameras, args.seed, args.out)
    print(f"wrote {counts} to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        import dataclasses
        cfg = dataclasses.replace(cfg, seed=args.seed)
    samples = _load_split(args.data, "train")
    train(cfg, samples, args.out, resume_from=args.resume)
    print(f"checkpoint and metrics log written under {args.out}")
    return 0


def _cmd_eval(args) -> int:
    bundle, _ = load_model(args.checkpoint)
    query = _load_split(args.data, "query")
    gallery = _load_split(args.data, "gallery")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.occlude_fraction is not None:
        clean, occluded, deltas = occlusion_eval(
            bundle, query, gallery, args.occlude_fraction, args.occlude_side,
            seed=args.seed)
        write_report_csv(clean, out / "report_clean.csv", cmc_path=out / "cmc_clean.csv")
        write_report_csv(occluded, out / "report_occluded.csv",
                         cmc_path=out / "cmc_occluded.csv")
        print(f"clean mAP {clean.mean_ap:.4f} rank1 {clean.rank(1):.4f}; "
              f"occluded mAP {occluded.mean_ap:.4f} rank1 {occluded.rank(1):.4f}; "
              f"rank1 drop {deltas['rank1_drop']:.4f}")
    else:
        report = evaluate(bundle, query, gallery)
        write_report_csv(report, out / "report.csv", cmc_path=out / "cmc.csv",
                         distmat_path=out / "distmat.bin")
        print(f"mAP {report.mean_ap:.4f} rank1 {report.rank(1):.4f}")
    return 0


def _cmd_viz(args) -> int:
    bundle, _ = load_model(args.checkpoint)
    samples = _load_split(args.data, "query")[: args.samples]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        amap = holistic_attention_map(bundle, sample.image, layer=args.layer)
        export_heatmap(amap, out / f"s{i:03d}_holistic.pgm",
                       overlay_image=sample.image,
                       overlay_path=out / f"s{i:03d}_holistic_overlay.ppm")
        for g in range(bundle.scheme.num_groups):
            gmap = partial_attention_map(bundle, sample.image, g, layer=args.layer)
            export_heatmap(gmap, out / f"s{i:03d}_group{g}.pgm",
                           overlay_image=sample.image,
                           overlay_path=out / f"s{i:03d}_group{g}_overlay.ppm")
    print(f"attention maps for {len(samples)} samples written to {out}")
    return 0


def _cmd_branch_out(args) -> int:
    bundle, _ = load_model(args.checkpoint)
    samples = _load_split(args.data, "query")[: args.samples]
    metrics = branch_out(bundle, samples, args.out)
    print(f"mask IoU {metrics['mask_iou']:.4f}, "
          f"keypoint PCK@4px {metrics['keypoint_pck']:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    base = _load_config(args.config)
    seeds = [args.seed] if args.seed is not None else [int(s) for s in args.seeds.split(",")]
    train_samples = _load_split(args.data, "train")
    query = _load_split(args.data, "query")
    gallery = _load_split(args.data, "gallery")
    records = ablate(args.suite, train_samples, query, gallery, seeds, base, args.out)
    for rec in records:
        mean_map, std_map = rec.aggregate.get("mAP", (float("nan"), 0.0))
        print(f"{rec.name}: mAP {mean_map:.4f} +/- {std_map:.4f} "
              f"({len(rec.failures)} failures)")
    return 0


def _cmd_shuffle(args) -> int:
    bundle, _ = load_model(args.checkpoint)
    samples = _load_split(args.data, "query")[: args.samples]
    score_feat, score_head, skipped = shuffle_probe(bundle, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_shuffle_csv(score_feat, score_head, out / "shuffle_scores.csv")
    ratio = shuffle_ratio(score_feat, score_head)
    dec = decoupling_score(bundle, samples)
    for i, j, why in skipped:
        print(f"skipped cell ({i},{j}): {why}", file=sys.stderr)
    print(f"off-diagonal feature/head score ratio {ratio:.3f}, "
          f"decoupling score {dec:.3f}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "viz": _cmd_viz,
    "branch-out": _cmd_branch_out,
    "ablate": _cmd_ablate,
    "shuffle": _cmd_shuffle,
}


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
