"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime or numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import harness as H
from . import model as M
from .errors import NumericalError, ValidationError
from .metrics import ResultsParseError
from .trainer import train, write_log_csv
from .transforms import Policy

TASKS_FOR = {
    "affinity": ["affinity"],
    "diversity": ["diversity", "entropy"],
    "switchoff": ["switchoff"],
    "toygauss": ["toygauss"],
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--jobs", type=int, default=1, help="parallel training runs")
    common.add_argument("--out", help="results directory (overrides the config)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="augmetrics", description="Affinity and Diversity measurements for data augmentation", parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train one model and write its log and final checkpoint")
    t.add_argument("--policy", default="Identity", help="policy label, e.g. 'Crop(4,100%%)+FlipLR(50%%)'")
    t.add_argument("--mode", choices=["dynamic", "static"], default="dynamic")
    for name, text in [
        ("affinity", "Affinity of every configured policy"),
        ("diversity", "loss-based and entropy Diversity"),
        ("switchoff", "switch-off sweep and lift"),
        ("toygauss", "two-Gaussian Affinity/KL grids"),
        ("sweep", "all tasks listed in the config"),
    ]:
        sub.add_parser(name, parents=[common], help=text)
    sub.add_parser("report", parents=[common], help="scatter data, switch-off curves and a summary table")
    return p


def _config(args, tasks=None) -> H.ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.out:
        overrides["outputs"] = args.out
    if tasks:
        overrides["tasks"] = tasks
    return H.load_config(args.config, **overrides)


def _cmd_train(args) -> None:
    cfg = _config(args)
    seed = cfg.seeds[0]
    splits = H.build_splits(cfg.dataset)
    spec = cfg.model_spec(splits.train.shape)
    steps = cfg.train["steps"]
    config = cfg.train_config(policy=Policy.parse(args.policy), mode=args.mode, seed=seed, checkpoint_steps=(steps,))
    run = train(spec, splits.train, splits.val, config, ds_test=splits.test)
    out = Path(cfg.outputs)
    out.mkdir(parents=True, exist_ok=True)
    write_log_csv(run, out / "log.csv")
    ck = run.checkpoints[steps]
    M.save_checkpoint(out / f"ckpt-{steps}", spec, ck.params, ck.velocity, ck.rng_state(seed))
    print(json.dumps({"policy": config.policy.label, "seed": seed, "val_acc": run.val_acc, "test_acc": run.test_acc, "final_train_loss": run.final_train_loss}))


def _cmd_experiment(args, tasks) -> None:
    cfg = _config(args, tasks)
    result = H.run_experiment(cfg, jobs=args.jobs)
    print(f"{result.trained} runs trained, {result.cached} reused; results in {result.out_dir}")
    if (result.out_dir / "results.csv").exists() and result.records:
        H.report(result.out_dir)
        print((result.out_dir / "table.txt").read_text(), end="")


def _cmd_report(args) -> None:
    out = Path(args.out) if args.out else Path(_config(args).outputs)
    paths = H.report(out)
    print((out / "table.txt").read_text(), end="")
    for p in paths.values():
        print(f"wrote {p}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            _cmd_train(args)
        elif args.command == "report":
            _cmd_report(args)
        else:
            _cmd_experiment(args, TASKS_FOR.get(args.command))
    except (ValidationError, ResultsParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
