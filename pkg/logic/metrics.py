"""
Metrics engine for PruneLab.

Accuracy / parameter-efficiency / search-cost bookkeeping and FLOPs
accounting. FLOPs convention: 2 per multiply-add, one forward pass of a
single example, biases/activations/pooling free; a zeroed weight removes
its multiply-adds.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from engine.mask import Mask, check_same_length
from engine.network import Architecture, Network
from errors import ConfigurationError, PruningLabError


@dataclass(frozen=True)
class MetricsRecord:
    test_accuracy: float
    val_accuracy: float
    compression_ratio: float
    flops: int
    retrain_epochs: float
    total_training_epochs: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def flops_per_position(arch: Architecture) -> np.ndarray:
    """FLOPs contributed by each flat weight position if it survives."""
    per_position = np.zeros(arch.d, dtype=np.int64)
    for param in arch.param_slices():
        layer = arch.layers[param.layer_index]
        if layer.kind == "dense":
            per_position[param.kernel] = 2
        else:
            _, out_h, out_w = arch.shapes[param.layer_index]
            per_position[param.kernel] = 2 * out_h * out_w
    return per_position


def count_flops(net: Network, mask: Mask) -> int:
    """Per-example forward FLOPs of W * m."""
    check_same_length(mask, net.d)
    return int(flops_per_position(net.arch)[mask.bits].sum())


def dense_flops(net: Network) -> int:
    return int(flops_per_position(net.arch).sum())


def speedup_over_original(dense: int, pruned: int) -> float:
    """Original FLOPs over pruned FLOPs."""
    if pruned <= 0:
        raise PruningLabError("Speedup is undefined for a network with zero FLOPs.")
    return dense / pruned


def speedup_over_technique(
    base_flops: int,
    other_flops: int,
    base_ratio: Optional[float] = None,
    other_ratio: Optional[float] = None,
) -> float:
    """Fine-tuning FLOPs over another technique's FLOPs at the same compression ratio."""
    if base_ratio is not None and other_ratio is not None and not np.isclose(base_ratio, other_ratio, rtol=1e-9):
        raise ConfigurationError(
            f"Technique speedups compare equal compression ratios only ({base_ratio} vs {other_ratio})."
        )
    if other_flops <= 0:
        raise PruningLabError("Speedup is undefined for a network with zero FLOPs.")
    return base_flops / other_flops


def search_cost(plan, technique, T: float, iterations: Optional[int] = None) -> Tuple[float, float]:
    """
    Retraining epochs and total training epochs for a pruning run.

    One-shot retrains t epochs, iterative k * t; reinitialization trains
    T + t epochs per run. The total adds the original T epochs.

    Args:
        plan: A PruningPlan (reads ``mode`` and ``iterations``).
        technique: A RetrainTechnique (reads ``variant`` and ``t``).
        T: Original training epochs.
        iterations: Iterations completed so far; defaults to ``plan.iterations``.

    Returns:
        (retrain_epochs, total_training_epochs)
    """
    t = technique.t
    per_run = T + t if technique.variant == "reinit" else t
    if plan.mode == "iterative":
        runs = plan.iterations if iterations is None else iterations
    else:
        runs = 1
    retrain = per_run * runs
    return retrain, T + retrain


def summarize_seeds(values: Iterable[float]) -> Tuple[float, float, float]:
    """Median, minimum and maximum across runs."""
    array = np.asarray(list(values), dtype=np.float64)
    if array.size == 0:
        raise PruningLabError("Cannot summarize an empty set of runs.")
    return float(np.median(array)), float(array.min()), float(array.max())
