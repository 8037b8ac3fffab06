"""Command line entry point: ``dopprune <command> --config run.toml``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..model_zoo import load_mask, load_params, save_params
from ..pruning import layer_stats
from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import Pipeline
from .report import compare_runs


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    seeds = (args.seed,) if getattr(args, "seed", None) is not None else None
    sparsities = (args.sparsity,) if getattr(args, "sparsity", None) is not None else None
    return cfg.with_overrides(out=args.out, seeds=seeds, sparsities=sparsities)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_train_ref(args) -> int:
    pipe = Pipeline(_config(args))
    _, acc = pipe.reference()
    _emit({"reference": str(pipe.reference_path()), "test_accuracy": acc})
    return 0


def cmd_extract(args) -> int:
    pipe = Pipeline(_config(args))
    store = pipe.dop_store()
    _emit({"store": str(pipe.store_path()), "patches": len(store), "classes": store.classes_present})
    return 0


def cmd_stitch(args) -> int:
    cfg = _config(args)
    pipe = Pipeline(cfg)
    out = Path(cfg.out) / "stitch"
    for seed in cfg.seeds:
        store = pipe.stitch_store(seed)
        store.save(out / f"seed{seed}")
        _emit({"store": str(out / f"seed{seed}"), "patches": len(store)})
    return 0


def cmd_prune(args) -> int:
    cfg = _config(args)
    pipe = Pipeline(cfg)
    out = Path(cfg.out) / "masks"
    out.mkdir(parents=True, exist_ok=True)
    from ..model_zoo import save_mask

    for s in cfg.sparsities:
        for seed in cfg.seeds:
            mask = pipe.prune(s, seed)
            path = out / f"mask-s{s:g}-seed{seed}.plab"
            save_mask(path, mask)
            stats = layer_stats(mask, pipe.spec)
            _emit({"mask": str(path), "kept": stats["kept"], "total": stats["total"],
                   "collapsed": stats["collapsed"]})
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    pipe = Pipeline(cfg)
    seed = cfg.seeds[0]
    if args.mask:
        mask = load_mask(args.mask)
    else:
        mask = pipe.prune(cfg.sparsities[0], seed)
    params = pipe.train_masked(mask, seed)
    path = Path(cfg.out) / "params" / f"params-seed{seed}.plab"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_params(path, params)
    _emit({"params": str(path), "test_accuracy": pipe.evaluate(params)})
    return 0


def cmd_eval(args) -> int:
    pipe = Pipeline(_config(args))
    _emit({"params": args.params, "test_accuracy": pipe.evaluate(load_params(args.params))})
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    report = Pipeline(cfg).run()
    for row in report.rows:
        _emit({k: row.get(k) for k in ("criterion", "mode", "sparsity", "seed", "status", "accuracy")})
    _emit({"out": cfg.out, "config_hash": report.config_hash, "failed": len(report.failures)})
    return 0 if report.ok else 1


def cmd_report(args) -> int:
    out = args.out or "report"
    table, csv_path, plots = compare_runs(args.runs, out)
    _emit({"csv": str(csv_path), "plots": [str(p) for p in plots], "rows": len(table)})
    return 0


COMMANDS = {
    "train-ref": (cmd_train_ref, "train the dense reference classifier"),
    "extract": (cmd_extract, "extract the discriminative patch store"),
    "stitch": (cmd_stitch, "build super-stitched patch stores"),
    "prune": (cmd_prune, "compute pruning masks"),
    "finetune": (cmd_finetune, "fine-tune a masked network"),
    "eval": (cmd_eval, "evaluate saved parameters on the test split"),
    "sweep": (cmd_sweep, "run every (sparsity, seed) cell of a config"),
    "report": (cmd_report, "aggregate run directories into a CSV and plots"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dopprune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", help="output directory (overrides the config)")
        if name == "report":
            p.add_argument("runs", nargs="+", help="run directories holding report.jsonl")
            continue
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="run only this seed")
        if name in ("prune", "finetune", "sweep"):
            p.add_argument("--sparsity", type=float, help="run only this sparsity")
        if name == "finetune":
            p.add_argument("--mask", help="mask file from `prune` (otherwise pruned on the fly)")
        if name == "eval":
            p.add_argument("--params", required=True, help="parameter file to evaluate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command][0](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
