"""Command-line entry point: ``pairdet generate|train|evaluate|experiment``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .detector import load_checkpoint
from .evaluation import EvalConfig
from .harness.config import ExperimentConfig, TrainConfig, apply_overrides
from .harness.experiments import compare_variants, fallback_experiment, offset_sweep, transfer_experiment
from .harness.training import InputBuilder, evaluate_model, train
from .synthdata import (
    DatasetSpec,
    SceneSpec,
    generate_collection,
    generate_scene,
    load_collection,
    save_collection,
    save_dataset,
)

log = logging.getLogger("pairdet")


def _generate(args: argparse.Namespace) -> int:
    raw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.collection or "scene" in raw or "train_scenes" in raw:
        spec = DatasetSpec.from_dict(raw)
        path = save_collection(generate_collection(spec), args.out)
        log.info("wrote %d train / %d test scenes to %s", spec.train_scenes, spec.test_scenes, path)
    else:
        seq = generate_scene(SceneSpec.from_dict(raw), Path(args.out).name)
        save_dataset(seq, args.out)
        log.info("wrote %d frames to %s", len(seq.frames), args.out)
    return 0


def _train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    cfg = apply_overrides(cfg, args.set or [])
    if getattr(args, "dataset", None):
        cfg = replace(cfg, dataset=args.dataset)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _train(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    if not cfg.dataset:
        raise SystemExit("train: no dataset given (config 'dataset' or --dataset)")
    if not cfg.output_dir:
        raise SystemExit("train: no output directory given (config 'output_dir' or --out)")
    _, runlog = train(cfg)
    last = runlog.losses[-1]["total"] if runlog.losses else float("nan")
    print(f"checkpoint {runlog.checkpoint}  final loss {last:.5f}")
    return 0


def _evaluate(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    col = load_collection(args.dataset)
    seqs = col.test if args.split == "test" else col.train
    report = evaluate_model(
        model, seqs, InputBuilder(), args.offset, EvalConfig(args.iou), args.fallback,
        args.score_thr, args.nms_thr, args.max_dets, col.class_names,
    )
    report.write(args.out)
    print(f"mAP@{args.iou:g} {report.mean_ap:.4f}  ->  {args.out}")
    return 0


def _experiment(args: argparse.Namespace) -> int:
    exp = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    base = apply_overrides(exp.train, args.set or [])
    if args.dataset:
        base = replace(base, dataset=args.dataset)
    if not base.dataset:
        raise SystemExit("experiment: no dataset given (config train.dataset or --dataset)")
    col = load_collection(base.dataset)
    builder = InputBuilder()
    if args.kind == "variants":
        report = compare_variants(col, base, exp.seeds, builder)
    elif args.kind == "offsets":
        report = offset_sweep(col, base, exp.offsets, exp.seeds, exp.band, builder)
    elif args.kind == "transfer":
        source = args.source or exp.source_dataset
        if not source:
            raise SystemExit("experiment transfer: no source dataset (config source_dataset or --source)")
        report = transfer_experiment(
            load_collection(source), col, base, exp.seeds, exp.transfer_fraction, exp.transfer_ratio, builder
        )
    else:
        if args.checkpoint:
            model = load_checkpoint(args.checkpoint)
        else:
            model, _ = train(replace(base, variant="double", output_dir=None), col, builder)
        report = fallback_experiment(model, col, base, builder)
    report.write(args.out)
    for row in report.rows:
        print(json.dumps(row))
    for check in report.checks:
        status = "PASS" if check.passed else "FAIL"
        suffix = "" if check.asserted else " (not asserted)"
        print(f"{status} {check.name}: {check.detail}{suffix}")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pairdet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic scene or train/test collection")
    g.add_argument("spec", nargs="?", help="SceneSpec or DatasetSpec JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--collection", action="store_true", help="read the file as a DatasetSpec")
    g.set_defaults(func=_generate)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("config", nargs="?", help="TrainConfig JSON")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.set_defaults(func=_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--offset", type=int, default=1)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--fallback", action="store_true", help="feed the target frame twice")
    e.add_argument("--score-thr", type=float, default=0.05)
    e.add_argument("--nms-thr", type=float, default=0.5)
    e.add_argument("--max-dets", type=int, default=100)
    e.set_defaults(func=_evaluate)

    x = sub.add_parser("experiment", help="run a comparison experiment")
    x.add_argument("kind", choices=("variants", "offsets", "transfer", "fallback"))
    x.add_argument("config", nargs="?", help="ExperimentConfig JSON")
    x.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a training field (repeatable)")
    x.add_argument("--dataset")
    x.add_argument("--source", help="source collection for transfer")
    x.add_argument("--checkpoint", help="trained two-frame model for fallback")
    x.add_argument("--out", required=True)
    x.set_defaults(func=_experiment)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"pairdet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
