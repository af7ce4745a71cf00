"""Command-line surface: train, evaluate, analyze, grad-check, synth.

Every failure prints one machine-parseable line ``error: <category>: <msg>``
to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import model as modelmod
from .checkpoint import CheckpointError, load_checkpoint
from .configio import load_config_file
from .data import SyntheticSpec, VolumeFormatError, generate_synthetic, load_dataset, save_dataset
from .engine import EngineError
from .gradcheck import run_op_gradchecks
from .model import ConfigError, analyze, format_report
from .train import TrainConfig, TrainingDiverged, evaluate_model, train

GRAD_TOLERANCE = 1e-4


def _fail(category: str, message: str) -> int:
    message = " ".join(str(message).split())  # single line
    print(f"error: {category}: {message}", file=sys.stderr)
    return 1


def _cmd_train(args) -> int:
    model_cfg, train_cfg = load_config_file(args.config)
    if train_cfg is None:
        train_cfg = TrainConfig()
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    result = train(model_cfg, train_cfg, out_dir=args.out)
    print(f"iterations: {len(result.losses)}")
    if result.losses:
        print(f"first loss: {result.losses[0]:.6f}")
        print(f"final loss: {result.losses[-1]:.6f}")
    print(f"training dsc: {result.train_dsc:.4f}")
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_evaluate(args) -> int:
    params, cfg, manifest = load_checkpoint(args.checkpoint)
    cases = load_dataset(args.data)
    rows, mean_dsc = evaluate_model(params, cfg, cases)
    out_path = Path(args.out) if args.out else None
    writer = csv.writer(sys.stdout if out_path is None else open(out_path, "w", newline=""))
    writer.writerow(["case_id", "class_id", "dsc", "hd", "hd_flag"])
    for r in rows:
        writer.writerow([r["case_id"], r["class_id"], f"{r['dsc']:.6f}", repr(r["hd"]), r["hd_flag"]])
    if out_path is not None:
        print(f"report: {out_path} ({len(rows)} rows)")
    print(f"mean dsc: {mean_dsc:.4f}")
    return 0


def _cmd_analyze(args) -> int:
    model_cfg, _ = load_config_file(args.config)
    report = analyze(model_cfg)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(format_report(report))
    if not report["valid"]:
        return _fail("config", "; ".join(report["violations"]))
    return 0


def _cmd_grad_check(args) -> int:
    errors = run_op_gradchecks(args.seed)
    width = max(len(name) for name in errors)
    failed = []
    for name, err in sorted(errors.items()):
        status = "ok" if err < GRAD_TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
        if err >= GRAD_TOLERANCE:
            failed.append(name)
    print(f"max relative error: {max(errors.values()):.3e}")
    if failed:
        return _fail("gradcheck", f"operators above tolerance: {failed}")
    return 0


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(
        cases=args.cases,
        patch_size=tuple(args.patch),
        num_classes=args.classes,
        noise=args.noise,
    )
    cases = generate_synthetic(args.seed, spec)
    save_dataset(
        args.out,
        cases,
        extra_meta={
            "seed": args.seed,
            "num_classes": args.classes,
            "patch_size": list(args.patch),
            "noise": args.noise,
        },
    )
    print(f"wrote {len(cases)} cases to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phtrans",
        description="Parallel hybrid 3D Swin/CNN segmentation network tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on synthetic or on-disk volumes")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(fn=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="per-case per-class DSC/HD report")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset directory")
    p_eval.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p_eval.set_defaults(fn=_cmd_evaluate)

    p_an = sub.add_parser("analyze", help="shape/parameter/FLOP report")
    p_an.add_argument("--config", required=True)
    p_an.add_argument("--json", action="store_true", help="machine-readable output")
    p_an.set_defaults(fn=_cmd_analyze)

    p_gc = sub.add_parser("grad-check", help="finite-difference table for every operator")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(fn=_cmd_grad_check)

    p_sy = sub.add_parser("synth", help="generate a synthetic ellipsoid dataset")
    p_sy.add_argument("--seed", type=int, required=True)
    p_sy.add_argument("--cases", type=int, required=True)
    p_sy.add_argument("--out", required=True)
    p_sy.add_argument("--patch", type=int, nargs=3, default=[16, 32, 32])
    p_sy.add_argument("--classes", type=int, default=2)
    p_sy.add_argument("--noise", type=float, default=0.05)
    p_sy.set_defaults(fn=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail("config", exc)
    except (CheckpointError, VolumeFormatError) as exc:
        return _fail("format", exc)
    except TrainingDiverged as exc:
        return _fail("training", exc)
    except EngineError as exc:
        return _fail("engine", exc)
    except FileNotFoundError as exc:
        return _fail("io", exc)


if __name__ == "__main__":
    sys.exit(main())
