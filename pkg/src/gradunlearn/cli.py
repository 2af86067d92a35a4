"""Command-line runner: ``python -m gradunlearn <subcommand>``.

Exit codes: 0 success, 2 invalid configuration or input, 3 I/O or missing
artifacts, 4 degenerate statistics.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import experiment as ex
from .data import DataError
from .gradstore import GradientStoreError
from .influence import InfluenceError
from .model import ModelError
from .stats import DegenerateStatisticsError
from .train import TrainError
from .unlearn import UnlearnError

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_DEGENERATE = 0, 2, 3, 4

# flag -> dotted config key
FLAG_KEYS = {
    "dataset": "dataset",
    "output_dir": "output_dir",
    "seed": "model.seed",
    "epochs": "train.epochs",
    "lr": "train.learning_rate",
    "eta": "unlearn.eta",
    "max_iters": "unlearn.max_iters",
    "eval_every": "unlearn.eval_every",
    "cutoff": "unlearn.match_cutoff",
    "method": "influence.method",
    "mode": "mode",
    "target": "target",
    "target_id": "target_id",
    "prompt": "prompt",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="TOML experiment file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override any config key, e.g. train.epochs=5")
    common.add_argument("--dataset", help="dataset file or fixture:<name>")
    common.add_argument("-o", "--output-dir", dest="output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gradunlearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="fine-tune and record gradients")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--method", choices=["hvp", "cosine"])

    p = sub.add_parser("unlearn", parents=[common], help="run the unlearning matrix")
    p.add_argument("--mode", choices=["iterative", "fuzzy"])
    p.add_argument("--target", help="exact sentence to forget (iterative mode)")
    p.add_argument("--target-id", dest="target_id", help="datapoint id to forget (iterative mode)")
    p.add_argument("--prompt", help="generation prompt (fuzzy mode)")
    p.add_argument("--eta", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--cutoff", type=float)
    p.add_argument("--method", choices=["hvp", "cosine"])
    p.add_argument("--cell", action="append", dest="cells", help="run only this matrix cell")

    p = sub.add_parser("influence", parents=[common], help="per-datapoint influence CSV")
    p.add_argument("--model", type=Path, help="snapshot to score (default: trained model)")
    p.add_argument("--method", choices=["hvp", "cosine"])
    p.add_argument("--scope", choices=["first_epoch", "all_epochs"], default="all_epochs")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("eval", parents=[common], help="perplexity and ROUGE CSV")
    p.add_argument("--model", type=Path)
    p.add_argument("--eval-dataset", dest="eval_dataset", type=Path,
                   help="dataset to score (default: the training dataset)")
    p.add_argument("--out", type=Path)

    sub.add_parser("report", parents=[common], help="summary tables and plots")

    p = sub.add_parser("inspect-grads", parents=[common], help="dump a gradient store as CSV")
    p.add_argument("store", type=Path)
    return parser


def resolve_config(args) -> ex.ExperimentConfig:
    overrides = list(args.overrides)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag in ("dataset", "output_dir") and not str(value).startswith("fixture:"):
            value = str(Path(value).resolve())
        overrides.append(f"{key}={_toml_literal(value)}")
    if args.config is not None:
        return ex.load_config(args.config, overrides)
    raw = ex.apply_overrides({}, overrides)
    return ex.config_from_dict(raw, Path.cwd())


def _toml_literal(value) -> str:
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(value)


def _emit(text: str, out: Optional[Path]):
    if out is None:
        sys.stdout.write(text)
    else:
        ex.atomic_write(out, text.encode("utf-8"))


def dispatch(args) -> int:
    if args.command == "inspect-grads":
        _emit(ex.inspect_grads(args.store), None)
        return EXIT_OK
    cfg = resolve_config(args)
    if args.command == "train":
        manifest = ex.run_train(cfg)
        print(f"trained: final loss {manifest['final_loss']:.4f}; artifacts in {cfg.output_dir}")
    elif args.command == "unlearn":
        for meta in ex.run_unlearn(cfg, args.cells):
            print(f"{meta['cell']}: target={meta['target'] or '-'} status={meta['status']} "
                  f"verified={meta['verified']} stop={meta['stop_iteration']} "
                  f"inflection={meta['inflection_iteration']} "
                  f"retained_ppl={meta['retained_perplexity']:.4f}")
    elif args.command == "influence":
        scope = args.scope
        _emit(ex.run_influence(cfg, args.model, scope).to_csv(), args.out)
    elif args.command == "eval":
        _emit(ex.run_eval(cfg, args.model, args.eval_dataset), args.out)
    elif args.command == "report":
        result = ex.run_report(cfg)
        for name, path in result.files.items():
            print(f"{name}: {path}")
        if result.degenerate:
            print("degenerate comparisons: " + ", ".join(result.degenerate), file=sys.stderr)
            return EXIT_DEGENERATE
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except DegenerateStatisticsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ex.ArtifactError, GradientStoreError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ex.ConfigError, ex.IncompatibleRunsError, DataError, ModelError, TrainError,
            UnlearnError, InfluenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
