"""Command-line surface.

Subcommands: generate-data, fit-statmodel, train, eval, experiment,
render, gradcheck. Every command reads an optional ``--config`` file and
accepts repeated ``--set section.key=value`` overrides. Exit codes:
0 success, 2 validation error, 3 non-finite-loss abort.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config entry")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshreg",
                                     description="2D/3D deformable mesh registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="synthesize a phantom dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")

    p = sub.add_parser("fit-statmodel", help="fit the PCA displacement model of a dataset")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output .tns bundle")

    p = sub.add_parser("train", help="train a registration model")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="run directory (default runs/<stamp>)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="metrics CSV path")

    p = sub.add_parser("experiment", help="run the SR vs MR comparison")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--mode", choices=["SR", "MR", "both"], default="both")

    p = sub.add_parser("render", help="write a truth/prediction overlay PNG")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p)
    p.add_argument("--out", type=Path, default=None, help="JSON report path")

    return parser


def _run_dir(base: Path | None, cfg) -> Path:
    from .config import config_hash

    if base is not None:
        return base
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{stamp}-{config_hash(cfg)[:8]}"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    from .config import ConfigError, load_config
    from .losses import LossError
    from .mesh import MeshValidationError
    from .metrics import MetricError
    from .network import NetworkError
    from .phantom import PhantomError
    from .projection import ProjectionError
    from .statmodel import StatModelError
    from .train import NanAbortError, TrainError

    validation_errors = (ConfigError, LossError, MeshValidationError, MetricError,
                         NetworkError, PhantomError, ProjectionError,
                         StatModelError, TrainError, FileNotFoundError)
    try:
        cfg = load_config(args.config, args.overrides)
        return _dispatch(args, cfg)
    except NanAbortError as err:
        print(f"aborted on non-finite loss: {err}", file=sys.stderr)
        if err.checkpoint_path:
            print(f"last good checkpoint: {err.checkpoint_path}", file=sys.stderr)
        return 3
    except validation_errors as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def _dispatch(args, cfg) -> int:
    from . import kernels

    if args.command == "generate-data":
        from .phantom import generate_dataset

        bundle = generate_dataset(cfg.data, args.out)
        print(f"wrote {cfg.data.n_train}+{cfg.data.n_test} samples to {bundle.root} "
              f"[{kernels.BACKEND} backend]")
        return 0

    if args.command == "fit-statmodel":
        from .phantom import load_dataset
        from .statmodel import fit_pca

        bundle = load_dataset(args.dataset)
        train_samples = bundle.train_samples()
        fields = np.stack([
            s.target - (s.mesh.vertices - s.jitter) for s in train_samples
        ])
        model = fit_pca(fields)
        model.save(args.out)
        print(f"fit {model.n_components} components over {len(train_samples)} fields -> {args.out}")
        return 0

    if args.command == "train":
        from .phantom import load_dataset
        from .train import train

        bundle = load_dataset(args.dataset)
        out = _run_dir(args.out, cfg)
        record = train(cfg, bundle, out)
        print(f"trained {len(record.epochs)} epochs in {record.wall_time_s:.1f}s "
              f"[{record.backend} backend]; final loss {record.epochs[-1].total:.5f}")
        print(f"checkpoint: {record.checkpoint_path}")
        return 0

    if args.command == "eval":
        from .train import evaluate_checkpoint

        out = args.out or (args.checkpoint.parent / "metrics.csv")
        rows, summary = evaluate_checkpoint(args.checkpoint, args.dataset, out,
                                            jitter=cfg.eval.jitter,
                                            eval_seed=cfg.eval.seed,
                                            voxel_mm=cfg.eval.voxel_mm)
        pred = summary["predicted"]["md_mm"]
        init = summary["initial"]["md_mm"]
        print(f"MD initial {init['mean']:.3f} mm -> predicted {pred['mean']:.3f} mm "
              f"over {len(rows)} samples; wrote {out}")
        return 0

    if args.command == "experiment":
        from .phantom import load_dataset
        from .train import run_experiment

        bundle = load_dataset(args.dataset)
        out = _run_dir(args.out, cfg)
        report = run_experiment(cfg, bundle, out, mode=args.mode)
        for organ in range(report["organs"]):
            parts = []
            for arm in ("SR", "MR"):
                if str(organ) in report[arm]:
                    parts.append(f"{arm} {report[arm][str(organ)]['predicted']['md_mm']['mean']:.3f}")
            print(f"organ {organ}: MD " + " vs ".join(parts))
        return 0

    if args.command == "render":
        from .network import load_checkpoint
        from .phantom import load_dataset
        from .train import render_overlay

        params, meta = load_checkpoint(args.checkpoint)
        bundle = load_dataset(args.dataset)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        render_overlay(params, meta, bundle, args.sample, args.out)
        print(f"wrote {args.out}")
        return 0

    if args.command == "gradcheck":
        from .train import gradcheck, gradcheck_zero_head

        report = gradcheck()
        zero_leak = gradcheck_zero_head()
        payload = {
            "max_rel_err": report.max_rel_err,
            "tolerance": report.tolerance,
            "passed": bool(report.passed and zero_leak == 0.0),
            "runtime_s": report.runtime_s,
            "zero_head_generator_grad": zero_leak,
            "entries": [
                {"loss": e.loss, "param": e.param, "max_rel_err": e.max_rel_err,
                 "checked": e.checked}
                for e in report.entries
            ],
        }
        if args.out:
            args.out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        for e in report.entries:
            status = "ok" if e.max_rel_err < report.tolerance else "FAIL"
            print(f"{status} {e.loss:7s} {e.param:14s} rel_err={e.max_rel_err:.3e}")
        print(f"max rel err {report.max_rel_err:.3e} (tol {report.tolerance}), "
              f"zero-head leak {zero_leak}, {report.runtime_s:.1f}s")
        return 0 if payload["passed"] else 2

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
