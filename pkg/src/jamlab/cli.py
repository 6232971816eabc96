"""Command-line entry point.

Subcommands: generate, train, evaluate, ablate, export-embeddings,
gradcheck. Errors exit nonzero after printing a single machine-parsable
line ``ERROR {json}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as config_mod
from . import training
from .config import ExperimentConfig
from .diagnostics import gradcheck_suite
from .synthetic import build_dataset
from .verification import report_table

GRADCHECK_TOLERANCE = 1e-4


def _fail(code: str, message: str, status: int = 2) -> int:
    print("ERROR " + json.dumps({"code": code, "message": message}), file=sys.stderr)
    return status


def _load_config(args) -> ExperimentConfig:
    cfg = (
        config_mod.load_config(args.config)
        if args.config
        else ExperimentConfig()
    )
    if args.seed is not None:
        cfg = cfg.variant(seed=args.seed)
    return cfg


def _add_common(p, data: bool = False, checkpoint: bool = False):
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    if data:
        p.add_argument("--data", type=Path, required=True, help="dataset directory")
    if checkpoint:
        p.add_argument("--checkpoint", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jamlab",
        description="pose-invariant face verification lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("generate", help="build the synthetic dataset"))

    p_train = sub.add_parser("train", help="train on the dataset's train split")
    _add_common(p_train, data=True)
    p_train.add_argument("--resume", type=Path, help="checkpoint to resume from")

    p_eval = sub.add_parser("evaluate", help="2D-only verification report")
    _add_common(p_eval, data=True, checkpoint=True)

    p_abl = sub.add_parser(
        "ablate", help="train 2d-only / jam / jam+je over all folds and compare"
    )
    _add_common(p_abl, data=True)

    p_exp = sub.add_parser("export-embeddings", help="write embedding CSVs")
    _add_common(p_exp, data=True, checkpoint=True)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--points", type=int, default=20)
    p_gc.add_argument("--out", type=Path, help="optional JSON result path")
    return parser


def _progress(rec: dict) -> None:
    print(
        f"epoch {rec['epoch']:3d}  lr {rec['lr']:.5f}  "
        f"loss {rec.get('loss', float('nan')):.4f}  val-tar {rec['val_tar']:.2f}"
    )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        if args.command == "generate":
            cfg = _load_config(args)
            layout = build_dataset(cfg.dataset, args.out, cfg.seed)
            config_mod.save_config(Path(args.out) / "config.json", cfg)
            print(f"wrote {len(layout.records)} samples to {layout.root}")
            return 0

        if args.command == "train":
            cfg = _load_config(args)
            result = training.train_single(
                cfg, args.data, args.out, resume=args.resume, log_fn=_progress
            )
            print(report_table({"trained": result.report}), end="")
            print(f"best epoch {result.best_epoch}, ran {result.epochs_run} epochs")
            return 0

        if args.command == "evaluate":
            cfg = _load_config(args)
            report = training.evaluate_checkpoint(
                cfg, args.checkpoint, args.data, args.out
            )
            print(report_table({"evaluate": report}), end="")
            return 0

        if args.command == "ablate":
            cfg = _load_config(args)
            training.ablate(cfg, args.data, args.out, log_fn=_progress)
            print((Path(args.out) / "table.txt").read_text(), end="")
            return 0

        if args.command == "export-embeddings":
            cfg = _load_config(args)
            paths = training.export_embeddings(
                cfg, args.checkpoint, args.data, args.out
            )
            for p in paths:
                print(p)
            return 0

        if args.command == "gradcheck":
            errors = gradcheck_suite(seed=args.seed, points=args.points)
            ok = True
            for name, err in errors.items():
                status = "pass" if err < GRADCHECK_TOLERANCE else "FAIL"
                ok &= err < GRADCHECK_TOLERANCE
                print(f"{name}: max relative error {err:.3e}  [{status}]")
            if args.out:
                args.out.parent.mkdir(parents=True, exist_ok=True)
                args.out.write_text(json.dumps(errors, indent=2) + "\n")
            if not ok:
                return _fail("gradcheck", "a loss term exceeded the tolerance", 1)
            return 0
    except FileNotFoundError as e:
        return _fail("not-found", str(e))
    except training.TrainingDiverged as e:
        return _fail("diverged", str(e), 3)
    except (ValueError, KeyError) as e:
        return _fail("invalid", str(e))

    return _fail("usage", f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
