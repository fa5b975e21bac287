"""
Sweep orchestration and result selection for PruneLab.

A sweep trains one base network per seed (recording the snapshots every
rewinding cell needs), runs every (technique, t, compression) cell, and
writes:

    results_raw.csv     one row per cell x seed (per iteration for iterative plans)
    results_pareto.csv  per (technique, compression) the t with the best median val accuracy
    baseline.csv        the unpruned network per seed
"""

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from database import queries
from database.snapshot_store import SnapshotStore, epoch_key
from engine.architectures import build_architecture
from engine.mask import Mask
from engine.network import Architecture, Network, evaluate
from errors import ConfigurationError, PruningLabError
from logic.config import DatasetSpec, ExperimentConfig
from logic.data_manager import DatasetSplits, export_workbook, load_dataset, num_classes
from logic.metrics import dense_flops, speedup_over_original, speedup_over_technique, summarize_seeds
from logic.retrainer import PrunedResult, RetrainTechnique, Retrainer
from utils import get_registry_path, get_snapshot_dir, log

RESULT_COLUMNS = [
    "arch",
    "technique",
    "t_epochs",
    "compression_ratio",
    "seed",
    "val_accuracy",
    "test_accuracy",
    "flops",
    "retrain_epochs",
    "total_epochs",
]
PARETO_COLUMNS = [
    "arch",
    "technique",
    "compression_ratio",
    "t_epochs",
    "val_median",
    "test_median",
    "test_min",
    "test_max",
    "flops",
    "retrain_epochs",
    "total_epochs",
]
BASELINE_COLUMNS = ["arch", "seed", "val_accuracy", "test_accuracy", "flops", "total_epochs"]
SORT_KEY = ["arch", "technique", "t_epochs", "compression_ratio", "seed"]
SAFE_ZONE_TECHNIQUES = ("fine_tune", "weight_rewind", "lr_rewind")
FLOAT_FORMAT = "%.10g"
RATIO_DECIMALS = 6
ONE_PERCENT = 0.01


@dataclass(frozen=True)
class ResultRow:
    arch: str
    technique: str
    t_epochs: float
    compression_ratio: float
    seed: int
    val_accuracy: float
    test_accuracy: float
    flops: int
    retrain_epochs: float
    total_epochs: float


@dataclass
class ExperimentResult:
    rows: List[ResultRow] = field(default_factory=list)
    baseline: List[Dict] = field(default_factory=list)
    failures: List[Dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


# ── sweep grid ───────────────────────────────────────────────────────


def sweep_grid(T: float, n: int = 10) -> List[float]:
    """
    Retraining times t_i = round(i * T / n) for i = 1..n.

    Whole epochs (half rounds up) when T is integral; zero and duplicate
    values are dropped.
    """
    if T <= 0:
        raise ConfigurationError(f"T must be positive, got {T}.")
    if n < 1:
        raise ConfigurationError(f"Sweep needs n >= 1, got {n}.")
    integral = float(T).is_integer()
    grid: List[float] = []
    for i in range(1, n + 1):
        value = i * T / n
        t = float(math.floor(value + 0.5)) if integral else value
        if t > 0 and t not in grid:
            grid.append(t)
    return grid


def retraining_times(config: ExperimentConfig) -> List[float]:
    if config.sweep.t_values is not None:
        return sorted(set(config.sweep.t_values))
    return sweep_grid(config.T, config.sweep.points)


def retention_epochs(T: float, t_values: Sequence[float]) -> List[float]:
    """Snapshot epochs a sweep needs: 0, T and every rewind point T - t."""
    epochs = {epoch_key(0.0), epoch_key(T)}
    epochs.update(epoch_key(T - t) for t in t_values if 0 <= t <= T)
    return sorted(epochs)


# ── base runs ────────────────────────────────────────────────────────


@lru_cache(maxsize=4)
def _cached_dataset(spec: DatasetSpec) -> DatasetSplits:
    return load_dataset(spec)


def run_id_for(config: ExperimentConfig, seed: int) -> str:
    """Stable id of a base training run; changes whenever anything that shapes the trained weights changes."""
    identity = {key: config.raw.get(key) for key in ("arch", "hidden", "dataset", "schedule", "optimizer")}
    digest = hashlib.sha1(json.dumps(identity, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:10]
    return f"{config.arch}-seed{seed}-{digest}"


@dataclass(eq=False)
class BaseRun:
    """One trained seed: its data, snapshot store and retrainer."""

    config: ExperimentConfig
    seed: int
    arch: Architecture
    splits: DatasetSplits
    store: SnapshotStore
    retrainer: Retrainer

    @property
    def run_id(self) -> str:
        return self.store.run_id

    def final_network(self) -> Network:
        return self.retrainer.final_network()

    def baseline(self) -> Dict:
        net = self.final_network()
        ones = Mask.ones(net.d)
        return {
            "arch": self.config.arch,
            "seed": self.seed,
            "val_accuracy": evaluate(net, ones, self.splits.val),
            "test_accuracy": evaluate(net, ones, self.splits.test),
            "flops": dense_flops(net),
            "total_epochs": self.config.T,
        }


def open_base_run(
    config: ExperimentConfig,
    seed: int,
    snapshot_dir: Optional[Path] = None,
    epochs: Optional[Sequence[float]] = None,
    train_if_missing: bool = True,
) -> BaseRun:
    """
    Attach to (or train) the base run for one seed.

    Args:
        config: Experiment config.
        seed: Run seed (initialization and data order).
        snapshot_dir: Snapshot root; defaults to the resolved output directory.
        epochs: Snapshot epochs the caller needs; defaults to the sweep's retention set.
        train_if_missing: Train from scratch when any needed epoch is absent
            or the registry does not mark the run as trained.

    Returns:
        A BaseRun whose store holds every requested epoch.
    """
    splits = _cached_dataset(config.dataset)
    arch = build_architecture(config.arch, splits.input_shape, num_classes(splits), config.hidden)
    root = snapshot_dir or get_snapshot_dir(config.output_dir)
    store = SnapshotStore(root, run_id_for(config, seed))
    retrainer = Retrainer(
        arch,
        store,
        config.schedule,
        config.optimizer,
        splits.train,
        seed,
        config.flags,
        val_set=splits.val,
        test_set=splits.test,
    )
    needed = list(epochs) if epochs is not None else retention_epochs(config.T, retraining_times(config))
    base = BaseRun(config, seed, arch, splits, store, retrainer)
    ok, run = queries.get_run(store.db_path, store.run_id)
    trained = ok and run is not None and run["status"] == "Trained"
    if trained and store.has_epochs(needed):
        return base
    if not train_if_missing:
        raise PruningLabError(f"Run {store.run_id} is not fully trained; run the 'train' stage first.")

    log(f"Training base network {store.run_id} for {config.T:g} epochs", "INFO")
    queries.register_run(store.db_path, store.run_id, config.arch, seed, config.T, config.to_json())
    needed = sorted(set(needed) | set(store.available_epochs()))
    store.reset()
    try:
        retrainer.train_base(needed)
    except Exception as exc:
        queries.set_run_status(store.db_path, store.run_id, "Failed")
        queries._safe_log_event(store.run_id, "TRAIN", f"Base training failed: {exc}", "Failed", store.db_path)
        raise
    queries.set_run_status(store.db_path, store.run_id, "Trained")
    queries._safe_log_event(
        store.run_id, "TRAIN", f"Trained {config.arch} for {config.T:g} epochs", "Success", store.db_path
    )
    return base


# ── cells ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class CellTask:
    config: ExperimentConfig
    seed: int
    technique: RetrainTechnique
    axis: Optional[float]
    snapshot_dir: str

    def describe(self) -> str:
        axis = "" if self.axis is None else f" axis={self.axis:g}"
        return f"{self.technique.variant} t={self.technique.t:g}{axis} seed={self.seed}"


def compression_axis(config: ExperimentConfig) -> List[Optional[float]]:
    """Second sweep axis: target ratios (one-shot global), exponents (one-shot structured) or none (iterative)."""
    if config.pruning.mode == "iterative":
        return [None]
    if config.pruning.heuristic == "structured":
        return [float(k) for k in config.sweep.exponents]
    return list(config.sweep.compression_ratios)


def run_cell(base: BaseRun, technique: RetrainTechnique, axis: Optional[float]) -> List[ResultRow]:
    """Prune and retrain one cell for one seed."""
    plan = base.config.pruning
    if plan.mode == "iterative":
        results: List[PrunedResult] = base.retrainer.iterative(plan, technique)
    elif plan.heuristic == "structured":
        results = [base.retrainer.one_shot(replace(plan, structured_exponent=int(axis)), technique)]
    else:
        results = [base.retrainer.one_shot(replace(plan, target_compression=axis), technique)]
    return [
        ResultRow(
            arch=base.config.arch,
            technique=technique.variant,
            t_epochs=float(technique.t),
            compression_ratio=float(result.metrics.compression_ratio),
            seed=base.seed,
            val_accuracy=float(result.metrics.val_accuracy),
            test_accuracy=float(result.metrics.test_accuracy),
            flops=int(result.metrics.flops),
            retrain_epochs=float(result.metrics.retrain_epochs),
            total_epochs=float(result.metrics.total_training_epochs),
        )
        for result in results
    ]


def _execute_cell(task: CellTask) -> Tuple[List[ResultRow], Optional[str]]:
    """Worker entry point; never raises so one bad cell cannot sink the pool."""
    try:
        base = open_base_run(task.config, task.seed, Path(task.snapshot_dir), train_if_missing=False)
        rows = run_cell(base, task.technique, task.axis)
    except Exception as exc:
        return [], f"{type(exc).__name__}: {exc}"
    queries._safe_log_event(
        base.run_id, "RETRAIN", f"Finished {task.describe()}", "Success", base.store.db_path
    )
    return rows, None


def build_tasks(config: ExperimentConfig, snapshot_dir: Path) -> List[CellTask]:
    tasks = []
    for seed in config.seeds:
        for variant in config.techniques:
            for t in retraining_times(config):
                for axis in compression_axis(config):
                    tasks.append(CellTask(config, seed, RetrainTechnique(variant, t), axis, str(snapshot_dir)))
    return tasks


# ── orchestration ────────────────────────────────────────────────────


def run_experiment(
    config: ExperimentConfig,
    jobs: int = 1,
    snapshot_dir: Optional[Path] = None,
    write: bool = True,
) -> ExperimentResult:
    """
    Run a full sweep and (optionally) write the CSV outputs.

    Args:
        config: Validated experiment config.
        jobs: Worker processes for the retraining cells; 1 runs in-process.
        snapshot_dir: Snapshot root override.
        write: Emit the CSV files into ``config.output_dir``.

    Returns:
        ExperimentResult with sorted rows, baseline rows and any failures.
    """
    if jobs < 1:
        raise ConfigurationError(f"--jobs must be >= 1, got {jobs}.")
    root = snapshot_dir or get_snapshot_dir(config.output_dir)
    registry = get_registry_path(root)
    result = ExperimentResult()

    for seed in config.seeds:
        try:
            base = open_base_run(config, seed, root)
        except PruningLabError as exc:
            log(f"Base run for seed {seed} failed: {exc}", "ERROR")
            result.failures.append({"cell": f"base seed={seed}", "error": str(exc)})
            continue
        result.baseline.append(base.baseline())

    trained = {row["seed"] for row in result.baseline}
    tasks = [task for task in build_tasks(config, root) if task.seed in trained]
    log(f"Running {len(tasks)} retraining cells with {jobs} worker(s)", "INFO")
    queries._safe_log_event("sweep", "SWEEP", f"Started {len(tasks)} cells", "Success", registry)

    if jobs == 1:
        outcomes = [_execute_cell(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_execute_cell, tasks))

    for task, (rows, error) in zip(tasks, outcomes):
        if error is not None:
            log(f"Cell {task.describe()} failed: {error}", "ERROR")
            queries._safe_log_event("sweep", "RETRAIN", f"{task.describe()}: {error}", "Failed", registry)
            result.failures.append({"cell": task.describe(), "error": error})
            continue
        result.rows.extend(rows)

    result.rows.sort(key=lambda row: tuple(getattr(row, key) for key in SORT_KEY))
    status = "Success" if result.ok else "Failed"
    queries._safe_log_event(
        "sweep", "SWEEP", f"Finished {len(tasks)} cells, {len(result.failures)} failed", status, registry
    )

    if write:
        write_results(result, config.output_dir, registry)
    return result


def rows_frame(rows: Sequence[ResultRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(row) for row in rows], columns=RESULT_COLUMNS)


def write_results(result: ExperimentResult, output_dir: str, registry: Optional[str] = None) -> Dict[str, Path]:
    """Write results_raw.csv, results_pareto.csv and baseline.csv."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = rows_frame(result.rows)
    paths = {
        "raw": out / "results_raw.csv",
        "pareto": out / "results_pareto.csv",
        "baseline": out / "baseline.csv",
    }
    raw.to_csv(paths["raw"], index=False, float_format=FLOAT_FORMAT)
    baseline = pd.DataFrame(result.baseline, columns=BASELINE_COLUMNS).sort_values(["arch", "seed"])
    add_speedups(select_pareto(raw), baseline).to_csv(paths["pareto"], index=False, float_format=FLOAT_FORMAT)
    baseline.to_csv(paths["baseline"], index=False, float_format=FLOAT_FORMAT)
    if registry:
        queries._safe_log_event("sweep", "REPORT", f"Wrote results to {out}", "Success", registry)
    log(f"Wrote {len(raw)} raw rows to {paths['raw']}", "SUCCESS")
    return paths


# ── selection and reports ────────────────────────────────────────────


def _with_ratio_key(raw: pd.DataFrame) -> pd.DataFrame:
    frame = raw.copy()
    frame["ratio_key"] = frame["compression_ratio"].round(RATIO_DECIMALS)
    return frame


def select_pareto(raw: pd.DataFrame) -> pd.DataFrame:
    """
    Per (arch, technique, compression), pick the t with the highest median
    validation accuracy (ties go to the smaller t) and report that t's test
    accuracy as median/min/max over seeds.
    """
    if raw.empty:
        return pd.DataFrame(columns=PARETO_COLUMNS)
    frame = _with_ratio_key(raw)
    selected = []
    for (arch, technique, ratio), group in frame.groupby(["arch", "technique", "ratio_key"], sort=True):
        best_t, best_val = None, -np.inf
        for t, by_t in sorted(group.groupby("t_epochs"), key=lambda item: item[0]):
            val_median = float(np.median(by_t["val_accuracy"]))
            if val_median > best_val:
                best_t, best_val = t, val_median
        chosen = group[group["t_epochs"] == best_t]
        test_median, test_min, test_max = summarize_seeds(chosen["test_accuracy"])
        selected.append(
            {
                "arch": arch,
                "technique": technique,
                "compression_ratio": float(chosen["compression_ratio"].iloc[0]),
                "t_epochs": float(best_t),
                "val_median": best_val,
                "test_median": test_median,
                "test_min": test_min,
                "test_max": test_max,
                "flops": int(np.median(chosen["flops"])),
                "retrain_epochs": float(chosen["retrain_epochs"].iloc[0]),
                "total_epochs": float(chosen["total_epochs"].iloc[0]),
            }
        )
    return pd.DataFrame(selected, columns=PARETO_COLUMNS)


def add_speedups(pareto: pd.DataFrame, baseline: pd.DataFrame) -> pd.DataFrame:
    """
    Append ``speedup_original`` and ``speedup_over_fine_tune`` to a Pareto table.

    Speedup over the original divides the arch's median dense FLOPs (from the
    baseline rows) by the row's FLOPs. Speedup over fine-tuning divides the
    fine_tune row's FLOPs at the same compression by the row's FLOPs. Missing
    references or zero FLOPs leave NaN.
    """
    if pareto.empty:
        return pareto.assign(speedup_original=pd.Series(dtype=float), speedup_over_fine_tune=pd.Series(dtype=float))
    frame = _with_ratio_key(pareto)
    dense = {arch: float(np.median(rows["flops"])) for arch, rows in baseline.groupby("arch")} if not baseline.empty else {}
    fine_tuned = {
        (row.arch, row.ratio_key): int(row.flops) for row in frame[frame["technique"] == "fine_tune"].itertuples()
    }
    originals, over_fine_tune = [], []
    for row in frame.itertuples():
        flops = int(row.flops)
        reference = fine_tuned.get((row.arch, row.ratio_key))
        if flops <= 0:
            originals.append(np.nan)
            over_fine_tune.append(np.nan)
            continue
        originals.append(speedup_over_original(dense[row.arch], flops) if row.arch in dense else np.nan)
        over_fine_tune.append(speedup_over_technique(reference, flops) if reference is not None else np.nan)
    out = pareto.copy()
    out["speedup_original"] = originals
    out["speedup_over_fine_tune"] = over_fine_tune
    return out


def report_safe_zone(raw: pd.DataFrame, T: float) -> Dict[str, Optional[Tuple[float, float]]]:
    """
    Per arch, the longest contiguous run of t (as t/T) in which both rewinding
    techniques match or beat fine-tuning's median test accuracy at every compression.

    Raises:
        ConfigurationError when the three techniques were not run on the same grid.
    """
    zones: Dict[str, Optional[Tuple[float, float]]] = {}
    frame = _with_ratio_key(raw)
    for arch, rows in frame.groupby("arch", sort=True):
        medians = {}
        grids = {}
        for technique in SAFE_ZONE_TECHNIQUES:
            subset = rows[rows["technique"] == technique]
            if subset.empty:
                raise ConfigurationError(f"{arch}: no rows for {technique}; the safe zone needs all three techniques.")
            medians[technique] = subset.groupby(["t_epochs", "ratio_key"])["test_accuracy"].median()
            grids[technique] = set(medians[technique].index)
        if not grids["fine_tune"] == grids["weight_rewind"] == grids["lr_rewind"]:
            raise ConfigurationError(f"{arch}: techniques were swept on different (t, compression) grids.")

        t_values = sorted({t for t, _ in grids["fine_tune"]})
        dominant = []
        for t in t_values:
            keys = [key for key in grids["fine_tune"] if key[0] == t]
            dominant.append(
                all(
                    medians["weight_rewind"][key] >= medians["fine_tune"][key]
                    and medians["lr_rewind"][key] >= medians["fine_tune"][key]
                    for key in keys
                )
            )

        best: Optional[Tuple[int, int]] = None
        start = None
        for index, flag in enumerate(dominant + [False]):
            if flag and start is None:
                start = index
            elif not flag and start is not None:
                if best is None or index - start > best[1] - best[0] + 1:
                    best = (start, index - 1)
                start = None
        zones[arch] = None if best is None else (t_values[best[0]] / T, t_values[best[1]] / T)
    return zones


def accuracy_drop_summary(pareto: pd.DataFrame, baseline: pd.DataFrame) -> pd.DataFrame:
    """
    Per (arch, technique), the largest compression with no accuracy drop and
    within a 1% drop, plus the speedups at the 1% point when the Pareto table
    carries them.
    """
    speedups = ["speedup_original", "speedup_over_fine_tune"]
    columns = [
        "arch",
        "technique",
        "baseline_test_median",
        "max_compression_no_drop",
        "max_compression_1pct_drop",
        *(f"{name}_1pct_drop" for name in speedups),
    ]
    summary = []
    for (arch, technique), group in pareto.groupby(["arch", "technique"], sort=True):
        base_rows = baseline[baseline["arch"] == arch]
        if base_rows.empty:
            continue
        reference = float(np.median(base_rows["test_accuracy"]))
        no_drop = group[group["test_median"] >= reference]["compression_ratio"]
        within = group[group["test_median"] >= reference - ONE_PERCENT]
        entry = {
            "arch": arch,
            "technique": technique,
            "baseline_test_median": reference,
            "max_compression_no_drop": float(no_drop.max()) if not no_drop.empty else np.nan,
            "max_compression_1pct_drop": float(within["compression_ratio"].max()) if not within.empty else np.nan,
        }
        at_point = within.loc[within["compression_ratio"].idxmax()] if not within.empty else None
        for name in speedups:
            value = at_point.get(name, np.nan) if at_point is not None else np.nan
            entry[f"{name}_1pct_drop"] = float(value)
        summary.append(entry)
    return pd.DataFrame(summary, columns=columns)


def build_report(output_dir: str, T: float, workbook: bool = False) -> Dict:
    """Recompute the Pareto table, safe zone and accuracy-drop summary from the written CSVs."""
    out = Path(output_dir)
    raw_path = out / "results_raw.csv"
    if not raw_path.exists():
        raise ConfigurationError(f"No results at {raw_path}; run the sweep first.")
    raw = pd.read_csv(raw_path)
    baseline_path = out / "baseline.csv"
    baseline = pd.read_csv(baseline_path) if baseline_path.exists() else pd.DataFrame(columns=BASELINE_COLUMNS)
    pareto = add_speedups(select_pareto(raw), baseline)
    summary = accuracy_drop_summary(pareto, baseline)
    try:
        zones = report_safe_zone(raw, T)
    except ConfigurationError as exc:
        log(f"Safe zone not computed: {exc}", "WARN")
        zones = {}
    summary_path = out / "summary.csv"
    summary.to_csv(summary_path, index=False, float_format=FLOAT_FORMAT)
    report = {"pareto": pareto, "summary": summary, "safe_zone": zones, "summary_path": summary_path}
    if workbook:
        path = out / "report.xlsx"
        sheets = {"Raw": raw, "Pareto": pareto, "Baseline": baseline, "Summary": summary}
        if export_workbook(sheets, str(path)):
            report["workbook"] = path
        else:
            log("openpyxl is unavailable; skipped the workbook", "WARN")
    return report
