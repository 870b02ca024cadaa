"""Command-line interface.

Subcommands:

* ``train``      — run episodic training from a TOML config
* ``eval``       — evaluate a checkpoint on a dataset split
* ``report``     — per-class metrics table from saved predictions
* ``gradcheck``  — finite-difference audit of the autodiff engine

Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure
(non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, scale_config
from .metrics import PredictionRecord, classification_report, format_report
from .tensor import (
    NonFiniteError,
    Tensor,
    conv2d,
    conv_transpose2d,
    grad_check,
    log_softmax,
    max_pool2d,
    pairwise_sqdist,
    relu,
)
from .trainer import TrainingAborted, evaluate_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scale is not None:
        cfg = scale_config(cfg, args.scale)
    result = train(cfg, log_dir=args.log_dir, quiet=not args.verbose)
    print(f"completed {result.episodes_run} episodes in {result.wall_seconds:.1f}s")
    print(f"train: mean loss {result.train_mean_loss:.4f}, mean accuracy {result.train_mean_accuracy:.4f}")
    if result.final_val is not None:
        print(f"val:   mean accuracy {result.final_val.mean_accuracy:.4f} over {result.final_val.episodes} episodes")
    if result.final_test is not None:
        print(f"test:  mean accuracy {result.final_test.mean_accuracy:.4f} over {result.final_test.episodes} episodes")
    print(f"artifacts in {result.log_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    want_records = args.report or args.predictions is not None
    summary, records = evaluate_checkpoint(
        args.checkpoint,
        cfg,
        split=args.split,
        episodes=args.episodes,
        seed=args.seed,
        collect_records=want_records,
    )
    print(json.dumps({"split": args.split, **summary.to_dict()}))
    if args.predictions is not None:
        with open(args.predictions, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(
                    json.dumps({"episode": r.episode, "true": r.true_class, "pred": r.predicted_class}) + "\n"
                )
        print(f"wrote {len(records)} predictions to {args.predictions}", file=sys.stderr)
    if args.report:
        print(format_report(classification_report(records)))
    return EXIT_OK


def _cmd_report(args) -> int:
    path = Path(args.predictions)
    if not path.is_file():
        raise ConfigError(f"predictions file {path} not found")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                PredictionRecord(episode=obj["episode"], true_class=obj["true"], predicted_class=obj["pred"])
            )
    if not records:
        raise ConfigError(f"predictions file {path} is empty")
    print(format_report(classification_report(records)))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)

    def t(*shape):
        return Tensor(rng.standard_normal(shape))

    cases = [
        (
            "dense chain (matmul, relu, square, sum)",
            lambda x, w, b: relu(x @ w + b).square().sum(),
            [t(4, 5), t(5, 3), t(3)],
        ),
        (
            "conv2d + max_pool2d + relu",
            lambda x, w, b: relu(max_pool2d(conv2d(x, w, b, stride=1, pad=1), 2)).sum(),
            [t(2, 3, 6, 6), t(4, 3, 3, 3), t(4)],
        ),
        (
            "conv_transpose2d (stride 2)",
            lambda x, w, b: conv_transpose2d(x, w, b, stride=2, pad=1).square().sum(),
            [t(2, 3, 4, 4), t(3, 2, 4, 4), t(2)],
        ),
        (
            "prototype distances + log softmax",
            lambda q, p: (log_softmax(-pairwise_sqdist(q, p)) * Tensor(np.eye(4)[[0, 1, 2, 3, 0, 1]])).sum(),
            [t(6, 8), t(4, 8)],
        ),
    ]
    failed = False
    for name, fn, points in cases:
        report = grad_check(fn, points, h=args.step, tol=args.tol)
        status = "PASS" if report.passed else "FAIL"
        print(f"[{status}] {name}: max rel err {report.max_rel_error:.3e} (tol {report.tolerance:.1e}, {report.num_checked} coords)")
        failed = failed or not report.passed
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("all gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run episodic training from a TOML config")
    p_train.add_argument("--config", required=True, help="path to TOML run configuration")
    p_train.add_argument("--log-dir", default=None, help="override the config's log directory")
    p_train.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p_train.add_argument("--scale", type=float, default=None, help="multiply episode budgets by this factor")
    p_train.add_argument("--verbose", action="store_true", help="print progress at every evaluation point")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("--config", required=True, help="path to TOML run configuration")
    p_eval.add_argument("--checkpoint", required=True, help="path to a saved checkpoint (.npz)")
    p_eval.add_argument("--split", default="test", help="dataset split to evaluate (default: test)")
    p_eval.add_argument("--episodes", type=int, default=None, help="number of episodes (default: config test_episodes)")
    p_eval.add_argument("--seed", type=int, default=None, help="episode sampling seed (default: config seed)")
    p_eval.add_argument("--report", action="store_true", help="print a per-class metrics table")
    p_eval.add_argument("--predictions", default=None, help="write per-query predictions to this JSONL file")
    p_eval.set_defaults(func=_cmd_eval)

    p_report = sub.add_parser("report", help="per-class metrics table from saved predictions")
    p_report.add_argument("--predictions", required=True, help="JSONL file written by `eval --predictions`")
    p_report.set_defaults(func=_cmd_report)

    p_grad = sub.add_parser("gradcheck", help="finite-difference audit of the autodiff engine")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--tol", type=float, default=1e-4, help="relative-error tolerance")
    p_grad.add_argument("--step", type=float, default=1e-5, help="finite-difference step size")
    p_grad.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NonFiniteError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
