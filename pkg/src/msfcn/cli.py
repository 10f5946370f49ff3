"""Command-line interface: synth, augment, train, eval, gradcheck, ablate,
describe.  Failures print a single machine-readable JSON line on stderr and
exit 1; usage errors exit 2."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .augment import augment_dataset
from .dataio import (
    PhantomSpec,
    load_sample,
    read_manifest,
    save_sample,
    split_entries,
    synth_phantoms,
    write_manifest,
)
from .errors import EngineError
from .gradcheck import standard_op_checks
from .model import ModelConfig, build_model, model_grad_check
from .train import (
    ABLATION_SUITES,
    TrainConfig,
    evaluate,
    load_model_from_checkpoint,
    load_train_config,
    run_ablation,
    train,
)

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _load_config(arg: str) -> TrainConfig:
    if arg == "default":
        return TrainConfig()
    return load_train_config(arg)


def cmd_synth(args) -> int:
    spec = PhantomSpec.for_size(args.image_size, seed=args.seed)
    samples = synth_phantoms(spec, args.n)
    out = Path(args.out)
    entries = []
    for i, s in enumerate(samples):
        split = "test" if i < args.test else "train"
        entries.append(save_sample(s, out / "data", split=split, case=s.id))
    write_manifest(entries, out / "manifest.json")
    print(f"wrote {len(entries)} phantoms to {out / 'manifest.json'}")
    return 0


def cmd_augment(args) -> int:
    entries = read_manifest(args.manifest)
    if args.split:
        entries = split_entries(entries, args.split)
    out = Path(args.out)
    new_entries = []
    for entry in entries:
        sample = load_sample(entry)
        for aug in augment_dataset([sample], crop_size=args.crop, shift=args.shift):
            new_entries.append(save_sample(aug, out / "data", split=entry.split, case=entry.case_id))
    write_manifest(new_entries, out / "manifest.json")
    print(f"wrote {len(new_entries)} augmented samples to {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.manifest:
        cfg.train_manifest = args.manifest
    every = max(1, cfg.max_iter // 20) if cfg.max_iter else 1

    def progress(it, lr, loss):
        if it % every == 0 or it == cfg.max_iter - 1:
            print(f"iter {it:6d}  lr {lr:.6f}  loss {loss:.6f}", flush=True)

    result = train(cfg, args.out, progress=progress)
    print(f"final checkpoint: {result.checkpoint_path}")
    print(f"training log: {Path(args.out) / 'training_log.csv'} (data_hash={result.data_hash})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    model = load_model_from_checkpoint(cfg.model, args.checkpoint)
    entries = read_manifest(args.manifest)
    if args.split:
        entries = split_entries(entries, args.split)
    report = evaluate(model, entries)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    table = report.format_table()
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_gradcheck(args) -> int:
    results = standard_op_checks(seed=args.seed)
    failed = False
    for name, err in results.items():
        ok = err < OP_TOLERANCE
        failed |= not ok
        print(f"{name:28s} {err:12.3e}  {'ok' if ok else 'FAIL'}")
    if not args.skip_model:
        err = model_grad_check(seed=args.seed)
        ok = err < MODEL_TOLERANCE
        failed |= not ok
        print(f"{'full_model':28s} {err:12.3e}  {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    if args.train_manifest:
        cfg.train_manifest = args.train_manifest
    if args.test_manifest:
        cfg.test_manifest = args.test_manifest
    train_entries = split_entries(read_manifest(cfg.train_manifest), "train")
    train_samples = [load_sample(e, classes=cfg.model.classes) for e in train_entries]
    result = run_ablation(args.suite, cfg, args.out, train_samples=train_samples)
    table = result.format_table()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.suite}.txt").write_text(table + "\n")
    hashes = ", ".join(f"{k}={v}" for k, v in result.data_hashes.items())
    print(table)
    print(f"training data hashes: {hashes}")
    for label, msg in result.errors.items():
        print(f"preset failed: {label}: {msg}", file=sys.stderr)
    return 0


def cmd_describe(args) -> int:
    cfg = _load_config(args.config)
    model = build_model(cfg.model, seed=cfg.seed)
    print(model.describe())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msfcn",
        description="Multi-scale fully convolutional LV segmentation on CPU.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic annulus phantoms")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=108)
    p.add_argument("--test", type=int, default=0, help="mark the first N entries as the test split")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="40x offline augmentation of a manifest")
    p.add_argument("--in", dest="manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop", type=int, default=108)
    p.add_argument("--shift", type=int, default=5)
    p.add_argument("--split", choices=["train", "test"], default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="JSON config path or 'default'")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None, help="override the train manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["train", "test"], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-model", action="store_true", help="skip the full-model check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare one ablation suite")
    p.add_argument("--suite", choices=sorted(ABLATION_SUITES), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-manifest", default=None)
    p.add_argument("--test-manifest", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("describe", help="print the layer table for a config")
    p.add_argument("--config", default="default")
    p.set_defaults(func=cmd_describe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EngineError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFound", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
