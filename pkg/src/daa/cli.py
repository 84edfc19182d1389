"""Command-line entry point: ``daa {generate,train,ablate,eval,check-grads}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import data as ds
from .config import VARIANTS, TrainConfig, parse_ablation


def _add_generate(sub) -> None:
    p = sub.add_parser("generate", help="write a synthetic two-domain dataset")
    p.add_argument("--size", type=int, default=32, help="image side in pixels (multiple of 8)")
    p.add_argument("--classes", type=int, default=3, choices=range(1, len(ds.CLASS_NAMES) + 1))
    p.add_argument("--shift-preset", default="default", choices=sorted(ds.SHIFT_PRESETS))
    p.add_argument("--n-source", type=int, default=400)
    p.add_argument("--n-target", type=int, default=400)
    p.add_argument("--n-eval", type=int, default=100, help="images in each of the two eval splits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _add_train_flags(p) -> None:
    p.add_argument("--config", help="JSON file mirroring TrainConfig; flags below override it")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)


def _add_train(sub) -> None:
    p = sub.add_parser("train", help="train one configuration and write its report")
    _add_train_flags(p)
    p.add_argument("--ablation", help="enabled components, e.g. L,T,G,M,I (empty string = source only)")
    p.add_argument("--single-instance-disc", action="store_true", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-checkpoint", action="store_true")


def _add_ablate(sub) -> None:
    p = sub.add_parser("ablate", help="run the seven ablation variants over seeds")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, default=1, help="run seeds 0..N-1")
    p.add_argument("--variants", default=",".join(VARIANTS), help="comma-separated subset")
    p.add_argument("--data", help="dataset shared by every seed; default generates one per seed")
    p.add_argument("--shift-preset", default="default", choices=sorted(ds.SHIFT_PRESETS))
    p.add_argument("--out", required=True)


def _add_eval(sub) -> None:
    p = sub.add_parser("eval", help="evaluate a trained model on a dataset's eval splits")
    p.add_argument("--model", required=True, help="directory with model.bin, model.json and config.json")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="target_eval", choices=["source_eval", "target_eval"])


def _add_check_grads(sub) -> None:
    from .gradsuite import CASES

    p = sub.add_parser("check-grads", help="finite-difference check of every op and loss")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--case", action="append", choices=sorted(CASES), help="restrict to a case (repeatable)")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_generate, _add_train, _add_ablate, _add_eval, _add_check_grads):
        add(sub)
    return parser


def config_from_args(args) -> TrainConfig:
    config = TrainConfig.load(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.eta is not None:
        overrides["eta"] = args.eta
    if args.iters is not None:
        overrides["iterations"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "ablation", None) is not None:
        overrides.update(parse_ablation(args.ablation))
    if getattr(args, "single_instance_disc", None):
        overrides["single_instance_disc"] = True
    return replace(config, **overrides)


def cmd_generate(args) -> int:
    spec = ds.SceneSpec(image_size=args.size, num_classes=args.classes)
    src, tgt = ds.SHIFT_PRESETS[args.shift_preset]
    ds.generate_dataset(spec, src, tgt, args.n_source, args.n_target, args.seed, args.out, args.n_eval)
    print(f"wrote {args.out} ({args.n_source} source, {args.n_target} target, {args.n_eval}+{args.n_eval} eval)")
    return 0


def cmd_train(args) -> int:
    from .train import run_experiment

    config = config_from_args(args)
    report = run_experiment(config, args.data, args.out, save_model=not args.no_checkpoint)
    print(f"target mAP {report['target_map']:.4f}  source mAP {report['source_map']:.4f}  ({report['wall_time']:.0f} s)")
    print(f"outputs in {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .experiments import DataSettings, run_suite, summarize, write_summary

    names = [n.strip() for n in args.variants.split(",") if n.strip()]
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise SystemExit(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    base = config_from_args(args)
    settings = DataSettings(shift_preset=args.shift_preset)
    results = run_suite(names, range(args.seeds), args.out, base, settings, data_dir=args.data)
    summary = summarize(results)
    write_summary(summary, Path(args.out) / "summary.json")
    print(f"{'variant':<12} {'median target mAP':>18} {'median source mAP':>18}")
    for name in names:
        s = summary[name]
        print(f"{name:<12} {s['median_target_map']:>18.4f} {s['median_source_map']:>18.4f}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate_detection, load_model

    manifest = ds.read_manifest(args.data)
    model, config = load_model(args.model, manifest.scene.num_classes, manifest.scene.image_size)
    samples = ds.load_dataset(args.data, args.split, mode="eval")
    result = evaluate_detection(model, samples, config)
    print(json.dumps({"split": args.split, **result}, indent=1, sort_keys=True))
    return 0


def cmd_check_grads(args) -> int:
    from .gradsuite import CASES, run_case

    names = args.case or list(CASES)
    start = time.perf_counter()
    failed = 0
    for name in names:
        results = [run_case(name, seed, args.h, args.tol) for seed in range(args.seeds)]
        worst = max(r.worst for r in results)
        bad = [r for r in results if not r.passed]
        failed += len(bad)
        skipped = sum(sum(rep.skipped.values()) for r in results for rep in r.reports)
        status = "ok" if not bad else f"FAIL (seeds {[r.seed for r in bad]})"
        print(f"{name:<24} worst rel err {worst:.2e}  skipped {skipped:>4}  {status}")
    elapsed = time.perf_counter() - start
    print(f"{len(names)} cases x {args.seeds} seeds, tol {args.tol:g}, h {args.h:g}: "
          f"{'all passed' if not failed else f'{failed} failures'} in {elapsed:.0f} s")
    return 0 if not failed else 1


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "check-grads": cmd_check_grads,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ds.DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
