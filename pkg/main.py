"""
PruneLab command-line entry point.

    python main.py train   --config exp.json
    python main.py prune   --config exp.json --compression 8 --mask out/m.prwm
    python main.py retrain --config exp.json --technique lr_rewind --t 10 --mask out/m.prwm
    python main.py iterate --config exp.json --technique lr_rewind
    python main.py sweep   --config exp.json --jobs 4
    python main.py flops   --config exp.json --mask out/m.prwm
    python main.py report  --config exp.json --workbook
"""

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

# Add the project directory to the path so Python finds the packages
base_path = os.path.dirname(os.path.abspath(__file__))
sys.path.append(base_path)

import pandas as pd  # noqa: E402

from database import queries  # noqa: E402
from engine.mask import Mask  # noqa: E402
from engine.serialization import load_mask, save_mask, save_network  # noqa: E402
from errors import ConfigurationError, PruningLabError  # noqa: E402
from logic import pruner  # noqa: E402
from logic.config import ExperimentConfig, apply_overrides, load_config  # noqa: E402
from logic.experiment import (  # noqa: E402
    BaseRun,
    build_report,
    open_base_run,
    retention_epochs,
    rows_frame,
    run_cell,
    run_experiment,
)
from logic.metrics import count_flops, dense_flops, speedup_over_original  # noqa: E402
from logic.retrainer import ALGORITHM_VARIANTS, VARIANTS, RetrainTechnique, algorithm_variant  # noqa: E402
from utils import get_snapshot_dir, log  # noqa: E402

COMMANDS = ("train", "prune", "retrain", "iterate", "sweep", "flops", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunelab", description="Train, prune and retrain experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="Experiment JSON document")
        cmd.add_argument("--technique", choices=VARIANTS, default=None)
        cmd.add_argument("--t", type=float, default=None, help="Retraining epochs")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", default=None, help="Output directory")
        cmd.add_argument("--jobs", type=int, default=1, help="Worker processes for sweep cells")
        cmd.add_argument("--compression", type=float, default=None, help="Target compression ratio")
        cmd.add_argument("--mask", default=None, help="PRWM mask file to read or write")
        if name == "report":
            cmd.add_argument("--workbook", action="store_true", help="Also write report.xlsx")
    return parser


def _first_seed(config: ExperimentConfig) -> int:
    return config.seeds[0]


def _technique(config: ExperimentConfig, t: Optional[float]) -> RetrainTechnique:
    if t is None:
        if config.sweep.t_values is None:
            raise ConfigurationError("Pass --t (or set sweep.t_values) to choose a retraining time.")
        t = config.sweep.t_values[0]
    return RetrainTechnique(config.techniques[0], t)


def _base_for(config: ExperimentConfig, technique: Optional[RetrainTechnique] = None) -> BaseRun:
    epochs = retention_epochs(config.T, [technique.t] if technique is not None else [])
    return open_base_run(config, _first_seed(config), get_snapshot_dir(config.output_dir), epochs=epochs)


def _mask_path(config: ExperimentConfig, args, ratio: float) -> Path:
    if args.mask:
        return Path(args.mask)
    return Path(config.output_dir) / f"mask_seed{_first_seed(config)}_x{ratio:g}.prwm"


# ── subcommands ──────────────────────────────────────────────────────


def cmd_train(config: ExperimentConfig, args) -> int:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in config.seeds:
        base = open_base_run(config, seed, get_snapshot_dir(config.output_dir))
        path = out / f"{base.run_id}.prwd"
        save_network(base.final_network(), path)
        log(f"Seed {seed}: final weights saved to {path}", "SUCCESS")
    return 0


def cmd_prune(config: ExperimentConfig, args) -> int:
    ratio = args.compression if args.compression is not None else config.sweep.compression_ratios[0]
    base = _base_for(config)
    net = base.final_network()
    mask = pruner.prune_to_compression(net, Mask.ones(net.d), ratio, base.retrainer.candidates())
    path = _mask_path(config, args, ratio)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_mask(mask, path)
    queries._safe_log_event(
        base.run_id, "PRUNE", f"Mask at {pruner.compression_ratio(mask):.3f}x saved to {path}", "Success", base.store.db_path
    )
    log(f"Pruned to {pruner.compression_ratio(mask):.3f}x ({mask.surviving}/{mask.d} weights), mask at {path}", "SUCCESS")
    return 0


def cmd_retrain(config: ExperimentConfig, args) -> int:
    technique = _technique(config, args.t)
    base = _base_for(config, technique)
    if args.mask:
        mask = load_mask(args.mask)
    elif args.compression is not None:
        net = base.final_network()
        mask = pruner.prune_to_compression(net, Mask.ones(net.d), args.compression, base.retrainer.candidates())
    else:
        raise ConfigurationError("retrain needs --mask or --compression.")
    retrained = base.retrainer.retrain(technique, mask)
    metrics = base.retrainer.measure(retrained, mask, replace(config.pruning, mode="one_shot"), technique, 1)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_network(retrained, out / f"{base.run_id}-{technique.variant}-t{technique.t:g}.prwd")
    queries._safe_log_event(
        base.run_id, "RETRAIN", f"{technique.variant} t={technique.t:g}", "Success", base.store.db_path
    )
    print(json.dumps(metrics.to_dict(), indent=2))
    return 0


def cmd_iterate(config: ExperimentConfig, args) -> int:
    variant = args.technique or "lr_rewind"
    if args.t is None and variant in ALGORITHM_VARIANTS:
        technique = algorithm_variant(variant, config.T)
    else:
        technique = RetrainTechnique(variant, args.t if args.t is not None else config.T)
    t = technique.t
    plan = replace(config.pruning, mode="iterative")
    iterative = replace(config, pruning=plan)
    base = _base_for(iterative, technique)
    rows = run_cell(base, technique, None)
    frame = rows_frame(rows)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"iterative_{variant}_t{t:g}_seed{base.seed}.csv"
    frame.to_csv(path, index=False, float_format="%.10g")
    print(frame.to_string(index=False))
    log(f"{len(rows)} iterations written to {path}", "SUCCESS")
    return 0


def cmd_sweep(config: ExperimentConfig, args) -> int:
    result = run_experiment(config, jobs=args.jobs)
    if not result.ok:
        log(f"{len(result.failures)} cell(s) failed", "ERROR")
        for failure in result.failures:
            log(f"{failure['cell']}: {failure['error']}", "ERROR")
        return 1
    log(f"Sweep finished: {len(result.rows)} rows", "SUCCESS")
    return 0


def cmd_flops(config: ExperimentConfig, args) -> int:
    base = _base_for(config)
    net = base.final_network()
    dense = dense_flops(net)
    log(f"Dense forward FLOPs: {dense}", "INFO")
    if args.mask:
        mask = load_mask(args.mask)
        pruned = count_flops(net, mask)
        log(
            f"Pruned forward FLOPs: {pruned} at {pruner.compression_ratio(mask):.3f}x compression, "
            f"speedup {speedup_over_original(dense, pruned):.3f}x",
            "INFO",
        )
    return 0


def cmd_report(config: ExperimentConfig, args) -> int:
    report = build_report(config.output_dir, config.T, workbook=args.workbook)
    with pd.option_context("display.width", 160, "display.max_columns", 20):
        print(report["pareto"].to_string(index=False))
        print()
        print(report["summary"].to_string(index=False))
    for arch, zone in report["safe_zone"].items():
        text = "none" if zone is None else f"t/T in [{zone[0]:.2f}, {zone[1]:.2f}]"
        log(f"{arch}: rewinding matches or beats fine-tuning for {text}", "INFO")
    if "workbook" in report:
        log(f"Workbook written to {report['workbook']}", "SUCCESS")
    return 0


HANDLERS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "retrain": cmd_retrain,
    "iterate": cmd_iterate,
    "sweep": cmd_sweep,
    "flops": cmd_flops,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = apply_overrides(
            load_config(args.config),
            technique=args.technique,
            t=args.t,
            seed=args.seed,
            out=args.out,
            compression=args.compression,
        )
        return HANDLERS[args.command](config, args)
    except PruningLabError as exc:
        log(str(exc), "ERROR")
        return 1


if __name__ == "__main__":
    sys.exit(main())
