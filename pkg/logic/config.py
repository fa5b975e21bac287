"""
Experiment configuration for PruneLab.

One JSON document is merged over the defaults below and turned into frozen
dataclasses. Unknown keys are rejected so typos never silently fall back
to a default.
"""

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from engine.architectures import ARCHITECTURES
from errors import ConfigurationError
from logic.retrainer import HEURISTICS, MODES, VARIANTS, PruningPlan, RetrainFlags
from logic.schedule import OptimizerConfig, Schedule, schedule_from_config

DATASET_KINDS = ("synthetic", "idx")

DEFAULT_DATASET = {
    "kind": "synthetic",
    "seed": 0,
    "classes": 4,
    "n_train": 512,
    "n_test": 1000,
    "shape": [1, 8, 8],
    "separation": 1.0,
    "noise": 1.0,
    "train_images": None,
    "train_labels": None,
    "test_images": None,
    "test_labels": None,
    "val_fraction": 0.2,
    "split_seed": 0,
}

DEFAULT_SCHEDULE = {
    "T": 20,
    "segments": [
        {"start": 0, "end": 10, "rate": 0.1},
        {"start": 10, "end": 15, "rate": 0.01},
        {"start": 15, "end": 20, "rate": 0.001},
    ],
    "warmup_end": None,
    "peak_rate": None,
    "warmup_start_rate": 0.0,
}

DEFAULT_OPTIMIZER = {"momentum": 0.9, "weight_decay": 0.0002, "batch_size": 64}

DEFAULT_PRUNING = {
    "mode": "one_shot",
    "heuristic": "global_magnitude",
    "per_iter_fraction": 0.2,
    "iterations": 1,
    "structured_rates": {},
}

DEFAULT_SWEEP = {
    "points": 10,
    "t_values": None,
    "compression_ratios": [2.0, 4.0, 8.0, 16.0],
    "exponents": [1, 2, 3, 4, 5],
}

DEFAULT_FLAGS = {"prune_biases": True, "prune_final_layer": True, "rewind_optimizer_state": True}

DEFAULT_CONFIG = {
    "arch": "conv4",
    "hidden": 64,
    "dataset": DEFAULT_DATASET,
    "schedule": DEFAULT_SCHEDULE,
    "optimizer": DEFAULT_OPTIMIZER,
    "pruning": DEFAULT_PRUNING,
    "techniques": ["fine_tune", "weight_rewind", "lr_rewind"],
    "sweep": DEFAULT_SWEEP,
    "seeds": 3,
    "output_dir": "results",
    "flags": DEFAULT_FLAGS,
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    seed: int = 0
    classes: int = 4
    n_train: int = 512
    n_test: int = 1000
    shape: Tuple[int, ...] = (1, 8, 8)
    separation: float = 1.0
    noise: float = 1.0
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    val_fraction: float = 0.2
    split_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigurationError(f"Dataset kind must be one of {DATASET_KINDS}, got '{self.kind}'.")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must lie in (0, 1), got {self.val_fraction}.")
        if self.kind == "synthetic":
            if self.classes < 2:
                raise ConfigurationError("A synthetic dataset needs at least two classes.")
            if self.n_train < self.classes or self.n_test < 2:
                raise ConfigurationError("Synthetic dataset sizes are too small for the class count.")
            return
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            path = getattr(self, name)
            if not path:
                raise ConfigurationError(f"IDX dataset needs '{name}'.")
            if not Path(path).exists():
                raise ConfigurationError(f"Dataset file not found: {path}")


@dataclass(frozen=True)
class SweepConfig:
    points: int = 10
    t_values: Optional[Tuple[float, ...]] = None
    compression_ratios: Tuple[float, ...] = (2.0, 4.0, 8.0, 16.0)
    exponents: Tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self) -> None:
        if self.points < 1:
            raise ConfigurationError("Sweep needs at least one retraining time.")
        if self.t_values is not None and not self.t_values:
            raise ConfigurationError("Explicit t_values must not be empty.")
        if not self.compression_ratios or any(r < 1.0 for r in self.compression_ratios):
            raise ConfigurationError("Compression ratios must be a non-empty list of values >= 1.")
        if not self.exponents or any(k < 1 for k in self.exponents):
            raise ConfigurationError("Structured exponents must be positive integers.")


@dataclass(frozen=True)
class ExperimentConfig:
    arch: str
    hidden: int
    dataset: DatasetSpec
    schedule: Schedule
    optimizer: OptimizerConfig
    pruning: PruningPlan
    techniques: Tuple[str, ...]
    sweep: SweepConfig
    seeds: Tuple[int, ...]
    output_dir: str
    flags: RetrainFlags
    raw: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"Unknown architecture '{self.arch}'. Choose one of: {', '.join(ARCHITECTURES)}.")
        if not self.seeds:
            raise ConfigurationError("At least one seed is required.")
        if not self.techniques:
            raise ConfigurationError("At least one retraining technique is required.")
        for name in self.techniques:
            if name not in VARIANTS:
                raise ConfigurationError(f"Unknown technique '{name}'. Choose one of: {', '.join(VARIANTS)}.")

    @property
    def T(self) -> float:
        return self.schedule.T

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True)


def _merge(section: str, defaults: Mapping[str, Any], values: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    values = values or {}
    if not isinstance(values, Mapping):
        raise ConfigurationError(f"'{section}' must be a JSON object.")
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigurationError(f"Unknown key(s) in '{section}': {', '.join(unknown)}.")
    merged = dict(defaults)
    merged.update(values)
    return merged


def _seeds(value: Any) -> Tuple[int, ...]:
    if isinstance(value, bool):
        raise ConfigurationError("'seeds' must be a count or a list of integers.")
    if isinstance(value, int):
        if value < 1:
            raise ConfigurationError(f"'seeds' must be >= 1, got {value}.")
        return tuple(range(value))
    try:
        return tuple(int(seed) for seed in value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError("'seeds' must be a count or a list of integers.") from exc


def config_from_dict(document: Mapping[str, Any]) -> ExperimentConfig:
    """
    Build an ExperimentConfig from a parsed JSON document.

    Args:
        document: The decoded JSON object.

    Returns:
        A validated, immutable ExperimentConfig.

    Raises:
        ConfigurationError on unknown keys or invalid values.
    """
    top = _merge("config", DEFAULT_CONFIG, document)
    dataset = _merge("dataset", DEFAULT_DATASET, document.get("dataset"))
    schedule = _merge("schedule", DEFAULT_SCHEDULE, document.get("schedule"))
    optimizer = _merge("optimizer", DEFAULT_OPTIMIZER, document.get("optimizer"))
    pruning = _merge("pruning", DEFAULT_PRUNING, document.get("pruning"))
    sweep = _merge("sweep", DEFAULT_SWEEP, document.get("sweep"))
    flags = _merge("flags", DEFAULT_FLAGS, document.get("flags"))

    if pruning["mode"] not in MODES or pruning["heuristic"] not in HEURISTICS:
        raise ConfigurationError(f"Pruning mode/heuristic must be one of {MODES} / {HEURISTICS}.")

    try:
        structured = {int(k): float(v) for k, v in dict(pruning["structured_rates"]).items()}
        raw = {
            **top,
            "dataset": dataset,
            "schedule": schedule,
            "optimizer": optimizer,
            "pruning": pruning,
            "sweep": sweep,
            "flags": flags,
        }
        return ExperimentConfig(
            arch=str(top["arch"]),
            hidden=int(top["hidden"]),
            dataset=DatasetSpec(**{**dataset, "shape": tuple(int(v) for v in dataset["shape"])}),
            schedule=schedule_from_config(schedule),
            optimizer=OptimizerConfig(
                momentum=float(optimizer["momentum"]),
                weight_decay=float(optimizer["weight_decay"]),
                batch_size=int(optimizer["batch_size"]),
            ),
            pruning=PruningPlan(
                mode=pruning["mode"],
                heuristic=pruning["heuristic"],
                per_iter_fraction=float(pruning["per_iter_fraction"]),
                iterations=int(pruning["iterations"]),
                structured_rates=structured,
            ),
            techniques=tuple(str(name) for name in top["techniques"]),
            sweep=SweepConfig(
                points=int(sweep["points"]),
                t_values=None if sweep["t_values"] is None else tuple(float(t) for t in sweep["t_values"]),
                compression_ratios=tuple(float(r) for r in sweep["compression_ratios"]),
                exponents=tuple(int(k) for k in sweep["exponents"]),
            ),
            seeds=_seeds(top["seeds"]),
            output_dir=str(top["output_dir"]),
            flags=RetrainFlags(**{key: bool(value) for key, value in flags.items()}),
            raw=raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"Invalid configuration value: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a JSON experiment config."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            document = json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"Config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigurationError("The config document must be a JSON object.")
    return config_from_dict(document)


def apply_overrides(
    config: ExperimentConfig,
    technique: Optional[str] = None,
    t: Optional[float] = None,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    compression: Optional[float] = None,
) -> ExperimentConfig:
    """Narrow a config with CLI overrides; None leaves a field unchanged."""
    changes: Dict[str, Any] = {}
    raw = dict(config.raw)
    if technique is not None:
        changes["techniques"] = (technique,)
        raw["techniques"] = [technique]
    if seed is not None:
        changes["seeds"] = (int(seed),)
        raw["seeds"] = [int(seed)]
    if out is not None:
        changes["output_dir"] = out
        raw["output_dir"] = out
    sweep = config.sweep
    if t is not None:
        sweep = replace(sweep, t_values=(float(t),))
    if compression is not None:
        sweep = replace(sweep, compression_ratios=(float(compression),))
    if sweep is not config.sweep:
        changes["sweep"] = sweep
        raw["sweep"] = {**asdict(sweep), "t_values": None if sweep.t_values is None else list(sweep.t_values)}
    if not changes:
        return config
    return replace(config, raw=raw, **changes)
