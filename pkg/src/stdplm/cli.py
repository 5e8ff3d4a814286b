"""Command-line entry point: ``stdplm <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import training
from .config import ExperimentConfig, load_config, parse_override
from .data import load_pems
from .errors import StdPlmError
from .masks import generate_cm, generate_rm, save_mask

log = logging.getLogger("stdplm")


def _find_dataset(directory: Path) -> tuple[Path, Path]:
    """A dataset directory holds one ``*.npz`` array and one ``*.csv`` edge list."""
    if directory.is_file():
        raise FileNotFoundError(f"--data expects a directory, got file {directory}")
    arrays, edges = sorted(directory.glob("*.npz")), sorted(directory.glob("*.csv"))
    if len(arrays) != 1 or len(edges) != 1:
        raise FileNotFoundError(
            f"{directory} must contain exactly one .npz and one .csv (found {len(arrays)} and {len(edges)})"
        )
    return arrays[0], edges[0]


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = dict(parse_override(s) for s in getattr(args, "set", None) or [])
    if getattr(args, "data", None):
        data_path, adj_path = _find_dataset(Path(args.data))
        overrides.setdefault("data.data_path", str(data_path))
        overrides.setdefault("data.adjacency_path", str(adj_path))
    if getattr(args, "seed", None) is not None:
        overrides["train.seeds"] = [args.seed]
    if getattr(args, "task", None):
        overrides["task"] = args.task
    return config.with_overrides(overrides) if overrides else config


def _dataset_from_dir(directory: str | Path, config: ExperimentConfig):
    data_path, adj_path = _find_dataset(Path(directory))
    d = config.data
    return load_pems(data_path, adj_path, channels=list(d.channels) if d.channels else None,
                     binarize=d.binarize_adjacency, start=d.start,
                     interval_seconds=config.model.interval_seconds)


def _print_epoch(record: dict) -> None:
    log.info("epoch %4d  train %.4f  val MAE %.4f  (%.1fs)",
             record["epoch"], record["train_total"], record["val_mae"], record["seconds"])


def _default_run_dir(config: ExperimentConfig) -> Path:
    name = config.data.name or Path(config.data.data_path).stem or "run"
    return Path("runs") / f"{name}-{config.task}"


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2))


def cmd_train(args) -> int:
    config = _config(args)
    run_dir = Path(args.run_dir) if args.run_dir else _default_run_dir(config)
    artifacts = training.train(config, run_dir, on_epoch=_print_epoch)
    _emit({"run_dir": str(run_dir), **artifacts.test_metrics})
    return 0


def cmd_few_shot(args) -> int:
    config = _config(args)
    run_dir = Path(args.run_dir) if args.run_dir else _default_run_dir(config).with_name(
        f"{_default_run_dir(config).name}-fewshot{args.ratio:g}")
    artifacts = training.few_shot(config, args.ratio, run_dir, on_epoch=_print_epoch)
    _emit({"run_dir": str(run_dir), "ratio": args.ratio, **artifacts.test_metrics})
    return 0


def cmd_evaluate(args) -> int:
    _, config, _, _ = training.load_checkpoint(args.run_dir)
    dataset = _dataset_from_dir(args.data, config) if args.data else None
    metrics = training.evaluate(args.run_dir, dataset, args.task)
    _emit(metrics)
    return 0


def _cmd_predict(args, task: str) -> int:
    _, config, _, _ = training.load_checkpoint(args.run_dir)
    dataset = _dataset_from_dir(args.data, config) if args.data else None
    result = training.predict(args.run_dir, dataset, task)
    out = Path(args.out) if args.out else Path(args.run_dir) / f"{task}.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = result.pop("metrics")
    np.savez_compressed(out, **result)
    _emit({"predictions": str(out), "windows": int(result["prediction"].shape[0]), **metrics})
    return 0


def cmd_forecast(args) -> int:
    return _cmd_predict(args, "forecast")


def cmd_impute(args) -> int:
    return _cmd_predict(args, "impute")


def cmd_zero_shot(args) -> int:
    _, config, _, _ = training.load_checkpoint(args.source)
    target = _dataset_from_dir(args.data, config)
    target.name = Path(args.data).name
    out = Path(args.out) if args.out else Path(args.source) / "zero-shot" / target.name
    metrics = training.zero_shot(args.source, target, out)
    _emit({"out": str(out), **metrics})
    return 0


def cmd_gen_missing(args) -> int:
    config = _config(args)
    if args.data:
        dataset = _dataset_from_dir(args.data, config)
        shape, graph = dataset.data.shape, dataset.graph
    elif args.shape:
        shape, graph = tuple(args.shape), None
    else:
        raise StdPlmError("gen-missing needs --data DIR or --shape T N C")
    if args.pattern == "rm":
        mask = generate_rm(shape, args.rate, args.seed)
    else:
        if graph is None:
            raise StdPlmError("continuous missing needs a graph: pass --data DIR")
        mask = generate_cm(graph, shape[0], shape[2], args.rate, args.seed)
    path = save_mask(args.out, mask, args.pattern, args.rate, args.seed)
    _emit({"mask": str(path), "shape": list(mask.shape), "missing_fraction": float(1 - mask.mean())})
    return 0


def cmd_report(args) -> int:
    from .report import write_report

    written = write_report(args.run_dir, node=args.node)
    _emit({"written": [str(p) for p in written]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stdplm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="TOML or JSON experiment config")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int, help="train a single seed")
        p.add_argument("--data", help="dataset directory holding one .npz and one .csv")

    p = sub.add_parser("train", help="train a model and write a run directory")
    config_flags(p)
    p.add_argument("--task", choices=("forecast", "impute"))
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("few-shot", help="train on a chronological prefix of the training windows")
    config_flags(p)
    p.add_argument("--task", choices=("forecast", "impute"))
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_few_shot)

    p = sub.add_parser("evaluate", help="test metrics of a saved run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", help="dataset directory (defaults to the run's config)")
    p.add_argument("--task", choices=("forecast", "impute"))
    p.set_defaults(func=cmd_evaluate)

    for name, func in (("forecast", cmd_forecast), ("impute", cmd_impute)):
        p = sub.add_parser(name, help=f"write {name} predictions for the test split")
        p.add_argument("--run-dir", required=True)
        p.add_argument("--data")
        p.add_argument("--out", help="output .npz (default: <run-dir>/<command>.npz)")
        p.set_defaults(func=func)

    p = sub.add_parser("zero-shot", help="apply a trained run to another graph without updates")
    p.add_argument("--from", dest="source", required=True, help="source run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("gen-missing", help="generate and persist a missing-data mask")
    p.add_argument("--pattern", choices=("rm", "cm"), required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data")
    p.add_argument("--shape", type=int, nargs=3, metavar=("T", "N", "C"))
    p.add_argument("--out", default="masks")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_missing)

    p = sub.add_parser("report", help="metric tables and plots for a run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--node", type=int, default=0)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (StdPlmError, FileNotFoundError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
