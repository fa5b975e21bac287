"""
Retraining engine for PruneLab.

train_span(weights, mask, start_epoch, t) trains weights * mask for t epochs,
reading the schedule from start_epoch onwards. The retraining techniques
differ only in where the weights and the schedule offset come from:

    technique              start weights       schedule offset
    fine_tune              final (epoch T)     T
    weight_rewind          epoch T - t         T - t
    lr_rewind              final (epoch T)     T - t
    low_lr_weight_rewind   epoch T - t         T
    reinit                 fresh init          0   (trains T + t epochs)

Data order: data epoch e is shuffled by a PCG64 stream seeded from
(seed, e). Every retraining of length t reads data epochs T - t onwards,
so weight rewinding replays the original order and the techniques share
one order for a given t.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from database.snapshot_store import RNG_STATE_BYTES, Snapshot, SnapshotStore
from engine.mask import Mask
from engine.network import Architecture, Batch, Network, evaluate, init_network, loss_and_gradient
from engine.optimizer import OptimizerState, sgd_step
from errors import ConfigurationError, ScheduleError
from logic import pruner
from logic.metrics import MetricsRecord, count_flops, search_cost
from logic.schedule import OptimizerConfig, Schedule, lr_at

VARIANTS = ("fine_tune", "weight_rewind", "lr_rewind", "low_lr_weight_rewind", "reinit")
REWINDING_VARIANTS = ("weight_rewind", "lr_rewind", "low_lr_weight_rewind")
MODES = ("one_shot", "iterative")
HEURISTICS = ("global_magnitude", "structured")
REINIT_SEED_OFFSET = 1_000_003

StepObserver = Callable[[int, float, float, Network], None]


@dataclass(frozen=True)
class RetrainTechnique:
    variant: str
    t: float

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"Unknown technique '{self.variant}'. Choose one of: {', '.join(VARIANTS)}.")
        if self.t < 0:
            raise ConfigurationError(f"Retraining time must be >= 0, got {self.t}.")

    def check_against(self, T: float) -> None:
        if self.variant in REWINDING_VARIANTS and self.t > T + 1e-9:
            raise ScheduleError(f"{self.variant} cannot retrain for {self.t} epochs when T is {T}.")


@dataclass(frozen=True)
class PruningPlan:
    mode: str = "one_shot"
    heuristic: str = "global_magnitude"
    per_iter_fraction: float = pruner.DEFAULT_ITERATION_FRACTION
    iterations: int = 1
    target_compression: Optional[float] = None
    structured_rates: Dict[int, float] = field(default_factory=dict)
    structured_exponent: int = 1

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"Pruning mode must be one of {MODES}, got '{self.mode}'.")
        if self.heuristic not in HEURISTICS:
            raise ConfigurationError(f"Heuristic must be one of {HEURISTICS}, got '{self.heuristic}'.")
        if not 0.0 < self.per_iter_fraction < 1.0:
            raise ConfigurationError(f"per_iter_fraction must lie in (0, 1), got {self.per_iter_fraction}.")
        if self.mode == "iterative" and self.iterations < 1:
            raise ConfigurationError("Iterative pruning needs at least one iteration.")
        if self.heuristic == "structured" and not self.structured_rates:
            raise ConfigurationError("Structured pruning needs per-layer densities.")

    def rates(self, exponent: Optional[int] = None) -> pruner.StructuredRates:
        return pruner.StructuredRates(dict(self.structured_rates), exponent or self.structured_exponent)


@dataclass(frozen=True)
class RetrainFlags:
    prune_biases: bool = True
    prune_final_layer: bool = True
    rewind_optimizer_state: bool = True


@dataclass(frozen=True, eq=False)
class PrunedResult:
    network: Network
    mask: Mask
    technique: RetrainTechnique
    iteration: int
    metrics: MetricsRecord


# ── data order ───────────────────────────────────────────────────────


def data_order_generator(seed: int, data_epoch: int, round_index: int = 0) -> np.random.Generator:
    entropy = [int(seed), int(data_epoch)] if round_index == 0 else [int(seed), int(data_epoch), int(round_index)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def rng_state_blob(generator: np.random.Generator) -> bytes:
    """32-byte (state, increment) encoding of a PCG64 generator."""
    state = generator.bit_generator.state["state"]
    return int(state["state"]).to_bytes(16, "little") + int(state["inc"]).to_bytes(16, "little")


def generator_from_blob(blob: bytes) -> np.random.Generator:
    if len(blob) != RNG_STATE_BYTES:
        raise ConfigurationError(f"RNG state blob must be {RNG_STATE_BYTES} bytes.")
    bit_generator = np.random.PCG64()
    bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(blob[:16], "little"), "inc": int.from_bytes(blob[16:], "little")},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bit_generator)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def _to_steps(epochs: float, per_epoch: int) -> int:
    return int(round(epochs * per_epoch))


# ── masked training span ─────────────────────────────────────────────


def train_span(
    net: Network,
    mask: Mask,
    schedule: Schedule,
    start_epoch: float,
    duration: float,
    data: Batch,
    seed: int,
    optimizer: OptimizerConfig,
    state: Optional[OptimizerState] = None,
    order_start: Optional[float] = None,
    round_index: int = 0,
    rng_state: Optional[bytes] = None,
    checkpoint_epochs: Iterable[float] = (),
    on_checkpoint: Optional[Callable[[float, Network, OptimizerState, bytes], None]] = None,
    on_step: Optional[StepObserver] = None,
) -> Tuple[Network, OptimizerState]:
    """
    Train W * m for ``duration`` epochs starting at schedule epoch ``start_epoch``.

    Args:
        net: Starting weights (multiplied by the mask before the first step).
        mask: Pruning mask; pruned weights stay exactly 0.
        schedule: The original schedule S; rates past T use S[T].
        start_epoch: Schedule epoch of the first step.
        duration: Epochs to train.
        data: Training set.
        seed: Run seed for the data order.
        optimizer: Momentum, weight decay and batch size.
        state: Starting momentum buffer (zeros when omitted).
        order_start: First data epoch to read (defaults to ``start_epoch``).
        round_index: Iteration number; non-zero rounds draw fresh data orders.
        rng_state: PCG64 blob for the first data epoch (from a snapshot).
        checkpoint_epochs: Epochs (absolute) at which ``on_checkpoint`` fires.
        on_checkpoint: Called with (epoch, net, state, rng blob) before the step at that epoch.
        on_step: Called with (step, epoch, lr, net) before every step.

    Returns:
        (trained Network, final OptimizerState)
    """
    if duration < 0:
        raise ScheduleError(f"Training duration must be >= 0, got {duration}.")
    n = len(data)
    per_epoch = steps_per_epoch(n, optimizer.batch_size)
    total = _to_steps(duration, per_epoch)
    order_start = start_epoch if order_start is None else order_start
    order_step = _to_steps(order_start, per_epoch)
    start_step = start_epoch * per_epoch
    integral_start = abs(start_step - round(start_step)) < 1e-9

    mask_values = mask.as_dtype(net.weights.dtype)
    net = net.with_weights(net.weights * mask_values)
    if state is None:
        state = OptimizerState.zeros(net.d, dtype=net.weights.dtype)
    else:
        state = OptimizerState(state.velocity * mask_values, state.steps)

    checkpoints = {}
    for epoch in checkpoint_epochs:
        step = _to_steps(epoch - start_epoch, per_epoch)
        if 0 <= step <= total:
            checkpoints.setdefault(step, []).append(float(epoch))

    current_epoch = None
    permutation = None
    first_blob = rng_state

    def data_epoch_generator(data_epoch: int) -> np.random.Generator:
        nonlocal first_blob
        if first_blob is not None:
            generator = generator_from_blob(first_blob)
            first_blob = None
            return generator
        return data_order_generator(seed, data_epoch, round_index)

    for k in range(total + 1):
        data_step = order_step + k
        data_epoch, position = divmod(data_step, per_epoch)
        if k in checkpoints and on_checkpoint is not None:
            blob = rng_state_blob(data_order_generator(seed, data_epoch, round_index))
            for epoch in checkpoints[k]:
                on_checkpoint(epoch, net, state, blob)
        if k == total:
            break

        if data_epoch != current_epoch:
            permutation = data_epoch_generator(data_epoch).permutation(n)
            current_epoch = data_epoch
        batch = data.take(permutation[position * optimizer.batch_size : (position + 1) * optimizer.batch_size])

        if integral_start:
            epoch_now = (int(round(start_step)) + k) / per_epoch
        else:
            epoch_now = start_epoch + k / per_epoch
        lr = lr_at(schedule, epoch_now)
        if on_step is not None:
            on_step(k, epoch_now, lr, net)

        _, gradient = loss_and_gradient(net, mask, batch)
        net, state = sgd_step(net, mask, gradient, state, lr, optimizer.momentum, optimizer.weight_decay)

    return net, state


# ── retraining techniques ────────────────────────────────────────────


class Retrainer:
    """Runs the retraining techniques against one trained run's snapshot store."""

    def __init__(
        self,
        arch: Architecture,
        store: SnapshotStore,
        schedule: Schedule,
        optimizer: OptimizerConfig,
        train_set: Batch,
        seed: int,
        flags: RetrainFlags = RetrainFlags(),
        val_set: Optional[Batch] = None,
        test_set: Optional[Batch] = None,
    ):
        self.arch = arch
        self.store = store
        self.schedule = schedule
        self.optimizer = optimizer
        self.train_set = train_set
        self.seed = int(seed)
        self.flags = flags
        self.val_set = val_set
        self.test_set = test_set
        self.step_observer: Optional[StepObserver] = None

    @property
    def T(self) -> float:
        return self.schedule.T

    def candidates(self) -> Mask:
        return pruner.prunable_mask(self.arch, self.flags.prune_biases, self.flags.prune_final_layer)

    # ── original training ────────────────────────────────────────────

    def train_base(self, snapshot_epochs: Iterable[float] = ()) -> Network:
        """Train a fresh network for T epochs, recording snapshots at 0, T and ``snapshot_epochs``."""
        epochs = sorted({0.0, float(self.T), *(float(g) for g in snapshot_epochs)})
        bad = [g for g in epochs if g < 0 or g > self.T]
        if bad:
            raise ScheduleError(f"Snapshot epochs {bad} fall outside [0, {self.T}].")

        def record(epoch: float, net: Network, state: OptimizerState, blob: bytes) -> None:
            self.store.record(epoch, net.weights, state.velocity, blob)

        net = init_network(self.arch, self.seed)
        final, _ = train_span(
            net,
            Mask.ones(net.d),
            self.schedule,
            0.0,
            self.T,
            self.train_set,
            self.seed,
            self.optimizer,
            checkpoint_epochs=epochs,
            on_checkpoint=record,
            on_step=self.step_observer,
        )
        return final

    # ── start states ─────────────────────────────────────────────────

    def _restore(self, epoch: float) -> Snapshot:
        return self.store.restore(epoch)

    def _start_state(self, snapshot: Snapshot) -> Tuple[Network, Optional[OptimizerState]]:
        net = Network(self.arch, snapshot.weights)
        if self.flags.rewind_optimizer_state:
            return net, OptimizerState(snapshot.velocity, 0)
        return net, None

    def final_network(self) -> Network:
        """Final trained weights from the store."""
        return Network(self.arch, self._restore(self.T).weights)

    def _run(
        self,
        start: Tuple[Network, Optional[OptimizerState]],
        mask: Mask,
        start_epoch: float,
        t: float,
        round_index: int = 0,
        rng_state: Optional[bytes] = None,
    ) -> Tuple[Network, OptimizerState]:
        net, state = start
        return train_span(
            net,
            mask,
            self.schedule,
            start_epoch,
            t,
            self.train_set,
            self.seed,
            self.optimizer,
            state=state,
            order_start=self.T - t if t <= self.T else 0.0,
            round_index=round_index,
            rng_state=rng_state,
            on_step=self.step_observer,
        )

    def _carry(self, start: Tuple[Network, OptimizerState]) -> Tuple[Network, Optional[OptimizerState]]:
        net, state = start
        return (net, state) if self.flags.rewind_optimizer_state else (net, None)

    def fine_tune(self, mask: Mask, t: float, start=None, round_index: int = 0) -> Tuple[Network, OptimizerState]:
        """Final weights, retrained at the constant final rate."""
        RetrainTechnique("fine_tune", t)
        begin = self._carry(start) if start is not None else self._start_state(self._restore(self.T))
        return self._run(begin, mask, self.T, t, round_index)

    def weight_rewind(self, mask: Mask, t: float, round_index: int = 0) -> Tuple[Network, OptimizerState]:
        """Weights and schedule both rewound to epoch T - t."""
        RetrainTechnique("weight_rewind", t).check_against(self.T)
        snapshot = self._restore(self.T - t)
        blob = snapshot.rng_state if self.flags.rewind_optimizer_state and round_index == 0 else None
        return self._run(self._start_state(snapshot), mask, self.T - t, t, round_index, rng_state=blob)

    def lr_rewind(self, mask: Mask, t: float, start=None, round_index: int = 0) -> Tuple[Network, OptimizerState]:
        """Final weights on the last t epochs of the schedule."""
        RetrainTechnique("lr_rewind", t).check_against(self.T)
        begin = self._carry(start) if start is not None else self._start_state(self._restore(self.T))
        return self._run(begin, mask, self.T - t, t, round_index)

    def low_lr_weight_rewind(self, mask: Mask, t: float, round_index: int = 0) -> Tuple[Network, OptimizerState]:
        """Weights rewound to epoch T - t, retrained at the constant final rate."""
        RetrainTechnique("low_lr_weight_rewind", t).check_against(self.T)
        snapshot = self._restore(self.T - t)
        return self._run(self._start_state(snapshot), mask, self.T, t, round_index)

    def reinit_retrain(self, mask: Mask, t: float, fresh_seed: int, round_index: int = 0) -> Tuple[Network, OptimizerState]:
        """Fresh initialization trained for T + t epochs on the full schedule."""
        RetrainTechnique("reinit", t)
        net = init_network(self.arch, fresh_seed)
        return train_span(
            net,
            mask,
            self.schedule,
            0.0,
            self.T + t,
            self.train_set,
            self.seed,
            self.optimizer,
            order_start=0.0,
            round_index=round_index,
            on_step=self.step_observer,
        )

    def retrain(self, technique: RetrainTechnique, mask: Mask, start=None, round_index: int = 0) -> Network:
        """Dispatch on the technique variant and return the retrained W * m."""
        technique.check_against(self.T)
        net, _ = self._retrain_with_state(technique, mask, start, round_index)
        return net

    def _retrain_with_state(self, technique: RetrainTechnique, mask: Mask, start, round_index: int):
        t = technique.t
        if technique.variant == "fine_tune":
            return self.fine_tune(mask, t, start, round_index)
        if technique.variant == "lr_rewind":
            return self.lr_rewind(mask, t, start, round_index)
        if technique.variant == "weight_rewind":
            return self.weight_rewind(mask, t, round_index)
        if technique.variant == "low_lr_weight_rewind":
            return self.low_lr_weight_rewind(mask, t, round_index)
        return self.reinit_retrain(mask, t, self.seed + REINIT_SEED_OFFSET + round_index, round_index)

    # ── pruning drivers ──────────────────────────────────────────────

    def measure(self, net: Network, mask: Mask, plan: PruningPlan, technique: RetrainTechnique, iteration: int) -> MetricsRecord:
        if self.val_set is None or self.test_set is None:
            raise ConfigurationError("Validation and test sets are required to score pruned networks.")
        retrain_epochs, total_epochs = search_cost(plan, technique, self.T, iteration)
        return MetricsRecord(
            test_accuracy=evaluate(net, mask, self.test_set),
            val_accuracy=evaluate(net, mask, self.val_set),
            compression_ratio=pruner.compression_ratio(mask),
            flops=count_flops(net, mask),
            retrain_epochs=retrain_epochs,
            total_training_epochs=total_epochs,
        )

    def prune_once(self, plan: PruningPlan, net: Network, current: Mask, exponent: Optional[int] = None) -> Mask:
        if plan.heuristic == "structured":
            return pruner.intersect(pruner.structured_filter_prune(net, plan.rates(exponent)), current)
        if plan.mode == "iterative":
            return pruner.global_magnitude_prune(net, current, plan.per_iter_fraction, self.candidates())
        if plan.target_compression is None:
            raise ConfigurationError("One-shot global pruning needs a target compression ratio.")
        return pruner.prune_to_compression(net, current, plan.target_compression, self.candidates())

    def one_shot(self, plan: PruningPlan, technique: RetrainTechnique) -> PrunedResult:
        """Prune the final weights to the plan's target once, then retrain once."""
        technique.check_against(self.T)
        final = self.final_network()
        mask = self.prune_once(plan, final, Mask.ones(final.d))
        net = self.retrain(technique, mask)
        return PrunedResult(net, mask, technique, 1, self.measure(net, mask, plan, technique, 1))

    def iterative(self, plan: PruningPlan, technique: RetrainTechnique) -> List[PrunedResult]:
        """
        Repeat {prune, retrain} ``plan.iterations`` times.

        Fine-tuning and learning-rate rewinding continue from the previous
        iteration's weights; weight-rewinding variants restart from the
        epoch T - t snapshot every iteration.
        """
        technique.check_against(self.T)
        snapshot = self._restore(self.T)
        current = (Network(self.arch, snapshot.weights), OptimizerState(snapshot.velocity, 0))
        mask = Mask.ones(self.arch.d)
        results = []
        for iteration in range(1, plan.iterations + 1):
            mask = self.prune_once(plan, current[0], mask, exponent=iteration)
            start = current if iteration > 1 else None
            current = self._retrain_with_state(technique, mask, start, iteration - 1)
            net = current[0]
            results.append(PrunedResult(net, mask, technique, iteration, self.measure(net, mask, plan, technique, iteration)))
        return results

    def algorithm1(self, k: int, technique: Optional[RetrainTechnique] = None) -> List[PrunedResult]:
        """Prune 20% globally and retrain with learning-rate rewinding for T epochs, k times."""
        technique = technique or RetrainTechnique("lr_rewind", self.T)
        plan = PruningPlan(mode="iterative", iterations=k, per_iter_fraction=pruner.DEFAULT_ITERATION_FRACTION)
        return self.iterative(plan, technique)


ALGORITHM_VARIANTS = ("lr_rewind", "weight_rewind", "fine_tune")


def algorithm_variant(name: str, T: float) -> RetrainTechnique:
    """The retraining step of the iterative algorithm and its alternatives."""
    variants = {
        "lr_rewind": RetrainTechnique("lr_rewind", T),
        "weight_rewind": RetrainTechnique("weight_rewind", 0.9 * T),
        "fine_tune": RetrainTechnique("fine_tune", T),
    }
    if name not in variants:
        raise ConfigurationError(f"Unknown algorithm variant '{name}'. Choose one of: {', '.join(variants)}.")
    return variants[name]
