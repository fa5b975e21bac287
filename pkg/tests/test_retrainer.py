import numpy as np
import pytest

from database.snapshot_store import SnapshotStore
from engine.architectures import conv4, mlp2
from engine.mask import Mask
from engine.network import init_network
from errors import ConfigurationError, ScheduleError
from logic import pruner
from logic.data_manager import synthetic_clusters
from logic.retrainer import (
    PruningPlan,
    RetrainFlags,
    Retrainer,
    RetrainTechnique,
    algorithm_variant,
    data_order_generator,
    generator_from_blob,
    rng_state_blob,
    steps_per_epoch,
    train_span,
)
from logic.schedule import OptimizerConfig, Schedule, Segment, fine_tune_schedule, lr_at, rewound_schedule

STEPPED = Schedule(4.0, (Segment(0.0, 2.0, 0.1), Segment(2.0, 3.0, 0.01), Segment(3.0, 4.0, 0.001)))


def _data(classes, n, shape, seed):
    centers = np.random.default_rng(100).normal(0.0, 2.0, size=(classes, int(np.prod(shape))))
    return synthetic_clusters(classes, n, seed, shape, centers=centers)


def _retrainer(tmp_path, arch, schedule, n=64, batch_size=16, seed=3, flags=RetrainFlags()):
    shape = arch.input_shape
    classes = arch.num_classes
    return Retrainer(
        arch,
        SnapshotStore(tmp_path, f"run-{seed}"),
        schedule,
        OptimizerConfig(momentum=0.9, weight_decay=0.0002, batch_size=batch_size),
        _data(classes, n, shape, 1),
        seed,
        flags,
        val_set=_data(classes, 30, shape, 2),
        test_set=_data(classes, 30, shape, 3),
    )


def _first_step(retrainer, run):
    seen = []

    def observe(step, epoch, lr, net):
        if step == 0:
            seen.append((epoch, lr, net.weights.copy()))

    retrainer.step_observer = observe
    try:
        run()
    finally:
        retrainer.step_observer = None
    return seen[0]


# ── data order ───────────────────────────────────────────────────────


def test_rng_blob_restores_generator():
    generator = data_order_generator(7, 3)
    blob = rng_state_blob(generator)
    assert len(blob) == 32
    restored = generator_from_blob(blob)
    assert np.array_equal(restored.permutation(50), data_order_generator(7, 3).permutation(50))
    assert not np.array_equal(data_order_generator(7, 3, 1).permutation(50), data_order_generator(7, 3).permutation(50))
    with pytest.raises(ConfigurationError):
        generator_from_blob(b"x" * 5)


def test_steps_per_epoch_rounds_up():
    assert steps_per_epoch(60, 16) == 4
    assert steps_per_epoch(64, 16) == 4
    assert steps_per_epoch(3, 16) == 1


def test_train_span_zero_duration_only_masks(tmp_path):
    arch = mlp2((4,), 3, hidden=6)
    net = init_network(arch, 0)
    bits = np.ones(net.d, dtype=bool)
    bits[:5] = False
    out, state = train_span(net, Mask(bits), STEPPED, 1.0, 0.0, _data(3, 20, (4,), 1), 0, OptimizerConfig())
    assert np.array_equal(out.weights, net.weights * Mask(bits).values)
    assert state.steps == 0


def test_train_span_uses_schedule_offset():
    arch = mlp2((4,), 3, hidden=6)
    rates = []
    train_span(
        init_network(arch, 0),
        Mask.ones(arch.d),
        STEPPED,
        1.5,
        1.0,
        _data(3, 32, (4,), 1),
        0,
        OptimizerConfig(batch_size=16),
        on_step=lambda step, epoch, lr, net: rates.append((epoch, lr)),
    )
    assert rates == [(1.5, 0.1), (2.0, 0.01)]


def _rates(retrainer, run):
    seen = []
    retrainer.step_observer = lambda step, epoch, lr, net: seen.append((epoch, lr))
    try:
        run()
    finally:
        retrainer.step_observer = None
    return seen


def test_retraining_rates_follow_technique_schedules(tmp_path):
    arch = mlp2((4,), 3, hidden=6)
    retrainer = _retrainer(tmp_path, arch, STEPPED)
    retrainer.train_base()
    mask = Mask.ones(arch.d)

    rewound = rewound_schedule(STEPPED, 2)
    seen = _rates(retrainer, lambda: retrainer.lr_rewind(mask, 2))
    assert len(seen) == 2 * 4
    assert [lr for _, lr in seen] == [lr_at(rewound, epoch - 2.0) for epoch, _ in seen]
    assert {lr for _, lr in seen} == {0.01, 0.001}

    tuned = fine_tune_schedule(STEPPED, 3)
    seen = _rates(retrainer, lambda: retrainer.fine_tune(mask, 3))
    assert [lr for _, lr in seen] == [lr_at(tuned, epoch - 4.0) for epoch, _ in seen]


# ── technique formulas ───────────────────────────────────────────────


def test_technique_start_weights_and_first_rates(tmp_path):
    arch = mlp2((4,), 3, hidden=6)
    assert 45 <= arch.d <= 55
    retrainer = _retrainer(tmp_path, arch, STEPPED)
    retrainer.train_base(snapshot_epochs=[2.0])
    w_final = retrainer.store.restore(4.0).weights
    w_rewound = retrainer.store.restore(2.0).weights
    mask = pruner.prune_to_compression(retrainer.final_network(), Mask.ones(arch.d), 2.0)
    m = mask.values

    epoch, lr, start = _first_step(retrainer, lambda: retrainer.fine_tune(mask, 2))
    assert (epoch, lr) == (4.0, 0.001)
    assert np.array_equal(start, w_final * m)

    epoch, lr, start = _first_step(retrainer, lambda: retrainer.weight_rewind(mask, 2))
    assert (epoch, lr) == (2.0, 0.01)
    assert np.array_equal(start, w_rewound * m)

    epoch, lr, start = _first_step(retrainer, lambda: retrainer.lr_rewind(mask, 2))
    assert (epoch, lr) == (2.0, 0.01)
    assert np.array_equal(start, w_final * m)

    epoch, lr, start = _first_step(retrainer, lambda: retrainer.low_lr_weight_rewind(mask, 2))
    assert (epoch, lr) == (4.0, 0.001)
    assert np.array_equal(start, w_rewound * m)

    epoch, lr, start = _first_step(retrainer, lambda: retrainer.reinit_retrain(mask, 2, fresh_seed=99))
    assert (epoch, lr) == (0.0, 0.1)
    assert np.array_equal(start, init_network(arch, 99).weights * m)


def test_retrained_weights_respect_mask(tmp_path):
    arch = mlp2((4,), 3, hidden=6)
    retrainer = _retrainer(tmp_path, arch, STEPPED)
    retrainer.train_base(snapshot_epochs=[2.0])
    mask = pruner.prune_to_compression(retrainer.final_network(), Mask.ones(arch.d), 4.0)
    for variant in ("fine_tune", "weight_rewind", "lr_rewind", "low_lr_weight_rewind", "reinit"):
        net = retrainer.retrain(RetrainTechnique(variant, 2), mask)
        assert np.all(net.weights[~mask.bits] == 0), variant


def test_rewinding_longer_than_training_is_rejected(tmp_path):
    arch = mlp2((4,), 3, hidden=6)
    retrainer = _retrainer(tmp_path, arch, STEPPED)
    retrainer.train_base()
    mask = Mask.ones(arch.d)
    for variant in ("weight_rewind", "lr_rewind", "low_lr_weight_rewind"):
        with pytest.raises(ScheduleError):
            retrainer.retrain(RetrainTechnique(variant, 5), mask)
    # fine-tuning past T keeps the final rate
    retrainer.retrain(RetrainTechnique("fine_tune", 5), mask)
    with pytest.raises(ConfigurationError):
        RetrainTechnique("fine_tune", -1)
    with pytest.raises(ConfigurationError):
        RetrainTechnique("prune_harder", 1)


# ── equivalences ─────────────────────────────────────────────────────


def test_full_weight_rewind_replays_original_training(tmp_path):
    schedule = Schedule(5.0, (Segment(0.0, 3.0, 0.05), Segment(3.0, 5.0, 0.005)))
    arch = mlp2((8,), 4, hidden=16)
    retrainer = _retrainer(tmp_path, arch, schedule, n=80, batch_size=16)
    trained = retrainer.train_base()
    replayed, _ = retrainer.weight_rewind(Mask.ones(arch.d), 5.0)
    assert np.array_equal(replayed.weights, trained.weights)
    assert np.array_equal(replayed.weights, retrainer.store.restore(5.0).weights)


@pytest.mark.parametrize("t", [1.0, 0.5])
def test_lr_rewind_equals_fine_tune_on_constant_suffix(tmp_path, t):
    arch = mlp2((4,), 3, hidden=6)
    retrainer = _retrainer(tmp_path, arch, STEPPED)
    retrainer.train_base()
    mask = pruner.prune_to_compression(retrainer.final_network(), Mask.ones(arch.d), 3.0)
    tuned, _ = retrainer.fine_tune(mask, t)
    rewound, _ = retrainer.lr_rewind(mask, t)
    assert lr_at(STEPPED, 4.0 - t) == STEPPED.final_rate
    assert np.array_equal(tuned.weights, rewound.weights)


def test_lr_rewind_differs_once_suffix_leaves_final_segment(tmp_path):
    arch = mlp2((4,), 3, hidden=6)
    retrainer = _retrainer(tmp_path, arch, STEPPED)
    retrainer.train_base()
    mask = pruner.prune_to_compression(retrainer.final_network(), Mask.ones(arch.d), 3.0)
    tuned, _ = retrainer.fine_tune(mask, 2)
    rewound, _ = retrainer.lr_rewind(mask, 2)
    assert not np.array_equal(tuned.weights, rewound.weights)


def test_retraining_is_deterministic(tmp_path):
    arch = mlp2((4,), 3, hidden=6)
    first = _retrainer(tmp_path / "a", arch, STEPPED)
    second = _retrainer(tmp_path / "b", arch, STEPPED)
    for retrainer in (first, second):
        retrainer.train_base(snapshot_epochs=[2.0])
    mask = pruner.prune_to_compression(first.final_network(), Mask.ones(arch.d), 2.0)
    a, _ = first.weight_rewind(mask, 2)
    b, _ = second.weight_rewind(mask, 2)
    assert np.array_equal(a.weights, b.weights)


# ── pruning drivers ──────────────────────────────────────────────────


def test_one_shot_reports_metrics(tmp_path):
    arch = mlp2((4,), 3, hidden=6)
    retrainer = _retrainer(tmp_path, arch, STEPPED)
    retrainer.train_base(snapshot_epochs=[2.0])
    plan = PruningPlan(target_compression=4.0)
    result = retrainer.one_shot(plan, RetrainTechnique("weight_rewind", 2))
    assert result.iteration == 1
    assert result.metrics.compression_ratio == pytest.approx(arch.d / result.mask.surviving)
    assert result.mask.surviving == arch.d - int(np.floor(arch.d * 0.75))
    assert result.metrics.retrain_epochs == 2
    assert result.metrics.total_training_epochs == 6
    assert 0.0 <= result.metrics.test_accuracy <= 1.0
    with pytest.raises(ConfigurationError):
        retrainer.one_shot(PruningPlan(), RetrainTechnique("fine_tune", 1))


def test_algorithm1_on_large_toy_network(tmp_path):
    schedule = Schedule(2.0, (Segment(0.0, 1.0, 0.05), Segment(1.0, 2.0, 0.005)))
    arch = mlp2((256,), 4, hidden=384)
    assert 95_000 <= arch.d <= 105_000
    retrainer = _retrainer(tmp_path, arch, schedule, n=64, batch_size=64)
    retrainer.train_base()
    results = retrainer.algorithm1(10)

    assert len(results) == 10
    surviving = arch.d
    previous = Mask.ones(arch.d)
    for j, result in enumerate(results, start=1):
        surviving -= int(np.floor(round(0.2 * surviving, 9)))
        assert result.iteration == j
        assert result.mask.surviving == surviving
        assert result.mask <= previous
        assert np.all(result.network.weights[~result.mask.bits] == 0)
        assert result.metrics.retrain_epochs == j * 2.0
        assert result.metrics.total_training_epochs == (j + 1) * 2.0
        previous = result.mask
    assert pruner.density(results[-1].mask) == pytest.approx(0.8**10, abs=1e-3)


@pytest.mark.parametrize("variant", ["weight_rewind", "fine_tune"])
def test_algorithm1_alternatives(tmp_path, variant):
    schedule = Schedule(5.0, (Segment(0.0, 3.0, 0.05), Segment(3.0, 5.0, 0.005)))
    arch = mlp2((4,), 3, hidden=6)
    retrainer = _retrainer(tmp_path, arch, schedule)
    technique = algorithm_variant(variant, schedule.T)
    retrainer.train_base(snapshot_epochs=[schedule.T - technique.t])
    results = retrainer.algorithm1(3, technique)
    assert [r.iteration for r in results] == [1, 2, 3]
    assert results[2].mask <= results[1].mask <= results[0].mask
    assert algorithm_variant("weight_rewind", 10).t == pytest.approx(9.0)
    with pytest.raises(ConfigurationError):
        algorithm_variant("reinit", 10)


def test_structured_one_shot_prunes_whole_filters(tmp_path):
    arch = conv4((1, 4, 4), 3, hidden=5, channels=(4, 3))
    retrainer = _retrainer(tmp_path, arch, STEPPED)
    retrainer.train_base(snapshot_epochs=[2.0])
    plan = PruningPlan(heuristic="structured", structured_rates={0: 0.5})
    result = retrainer.one_shot(plan, RetrainTechnique("lr_rewind", 2))
    first = arch.layers[0]
    filters = result.mask.bits[: first.kernel_size].reshape(first.out_channels, -1)
    assert sorted(filters.all(axis=1)) == [False, False, True, True]
    assert result.metrics.compression_ratio > 1.0

    squared = retrainer.one_shot(PruningPlan(heuristic="structured", structured_rates={0: 0.5}, structured_exponent=2), RetrainTechnique("lr_rewind", 2))
    assert squared.mask.surviving < result.mask.surviving
