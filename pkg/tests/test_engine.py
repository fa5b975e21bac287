import numpy as np
import pytest

from engine.architectures import build_architecture, conv4, mlp2
from engine.layers import LayerSpec
from engine.mask import Mask
from engine.network import (
    Architecture,
    Batch,
    Network,
    evaluate,
    forward,
    init_network,
    layer_slices,
    loss_and_gradient,
)
from errors import ConfigurationError, MaskError, NumericalError, ShapeError


def _batch(arch, n=6, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(n, *arch.input_shape)).astype(dtype)
    labels = rng.integers(0, arch.num_classes, size=n)
    return Batch(inputs, labels)


def _numeric_gradient(net, mask, batch, eps=1e-6):
    grad = np.zeros_like(net.weights)
    for i in range(net.d):
        plus = net.weights.copy()
        minus = net.weights.copy()
        plus[i] += eps
        minus[i] -= eps
        _, loss_plus = forward(net.with_weights(plus), mask, batch)
        _, loss_minus = forward(net.with_weights(minus), mask, batch)
        grad[i] = (loss_plus - loss_minus) / (2 * eps)
    return grad


# ── architecture ─────────────────────────────────────────────────────


def test_mlp2_parameter_count():
    arch = mlp2((784,), 10, hidden=64)
    assert arch.d == 784 * 64 + 64 + 64 * 10 + 10
    assert arch.num_classes == 10


def test_conv4_layout_and_shapes():
    arch = conv4((1, 8, 8), 4, hidden=64)
    assert arch.shapes[0] == (8, 8, 8)
    assert arch.shapes[4] == (16, 4, 4)
    assert arch.shapes[-1] == (4,)
    slices = layer_slices(init_network(arch, 0))
    assert [s.layer_index for s in slices] == [0, 2, 6, 8]
    assert slices[0].kernel == slice(0, 72)
    assert slices[0].bias == slice(72, 80)
    assert slices[-1].bias.stop == arch.d


def test_build_architecture_rejects_unknown_name():
    with pytest.raises(ConfigurationError):
        build_architecture("resnet20", (1, 8, 8), 4)


def test_incompatible_layers_are_rejected():
    with pytest.raises((ConfigurationError, ShapeError)):
        Architecture((5,), (LayerSpec.dense(4, 3),))


def test_init_is_deterministic_with_zero_biases():
    arch = mlp2((6,), 3, hidden=4)
    a = init_network(arch, 42)
    b = init_network(arch, 42)
    c = init_network(arch, 43)
    assert a.weights.dtype == np.float32
    assert np.array_equal(a.weights, b.weights)
    assert not np.array_equal(a.weights, c.weights)
    for param in layer_slices(a):
        assert np.all(a.weights[param.bias] == 0)
        bound = np.sqrt(6.0 / arch.layers[param.layer_index].fan_in)
        assert np.all(np.abs(a.weights[param.kernel]) <= bound)


# ── forward / backward ───────────────────────────────────────────────


@pytest.mark.parametrize(
    "arch",
    [
        mlp2((5,), 3, hidden=4),
        conv4((1, 4, 4), 3, hidden=5, channels=(2, 3)),
    ],
    ids=["mlp2", "conv4"],
)
def test_gradient_matches_finite_differences(arch):
    net = init_network(arch, 7).astype(np.float64)
    rng = np.random.default_rng(1)
    net = net.with_weights(net.weights + rng.normal(scale=0.1, size=net.d))
    bits = np.ones(net.d, dtype=bool)
    bits[::5] = False
    mask = Mask(bits)
    batch = _batch(arch, n=4, seed=3, dtype=np.float64)

    _, analytic = loss_and_gradient(net, mask, batch)
    numeric = _numeric_gradient(net, mask, batch)
    assert np.all(analytic[~bits] == 0)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_forward_uses_masked_weights():
    arch = mlp2((5,), 3, hidden=4)
    net = init_network(arch, 2)
    bits = np.ones(net.d, dtype=bool)
    bits[:7] = False
    mask = Mask(bits)
    batch = _batch(arch)
    logits_masked, _ = forward(net, mask, batch)
    zeroed = net.with_weights(net.weights * mask.values)
    logits_zeroed, _ = forward(zeroed, Mask.ones(net.d), batch)
    assert np.array_equal(logits_masked, logits_zeroed)


def test_forward_rejects_bad_inputs():
    arch = mlp2((5,), 3, hidden=4)
    net = init_network(arch, 2)
    with pytest.raises(MaskError):
        forward(net, Mask.ones(net.d - 1), _batch(arch))
    with pytest.raises(ShapeError):
        forward(net, Mask.ones(net.d), Batch(np.zeros((2, 4), np.float32), np.zeros(2, int)))
    with pytest.raises(ShapeError):
        forward(net, Mask.ones(net.d), Batch(np.zeros((2, 5), np.float32), np.array([0, 3])))


def test_evaluate_counts_argmax_hits():
    arch = Architecture((2,), (LayerSpec.dense(2, 2, has_bias=False),))
    net = Network(arch, np.array([1, 0, 0, 1], dtype=np.float32))
    inputs = np.array([[2, 1], [1, 2], [3, 0], [0, 3]], dtype=np.float32)
    labels = np.array([0, 1, 1, 1])
    assert evaluate(net, Mask.ones(4), Batch(inputs, labels)) == 0.75


def test_all_zero_mask_gives_uniform_logits():
    arch = conv4((1, 4, 4), 3, hidden=5, channels=(2, 3))
    net = init_network(arch, 4)
    logits, loss = forward(net, Mask.zeros(net.d), _batch(arch))
    assert np.all(logits == 0)
    assert loss == pytest.approx(np.log(3), rel=1e-6)


def test_non_finite_inputs_raise_numerical_error():
    arch = mlp2((5,), 3, hidden=4)
    net = init_network(arch, 2)
    batch = _batch(arch)
    batch.inputs[1, 2] = np.nan
    with pytest.raises(NumericalError):
        forward(net, Mask.ones(net.d), batch)
    batch.inputs[1, 2] = np.inf
    with pytest.raises(NumericalError):
        evaluate(net, Mask.ones(net.d), batch)


def test_evaluate_rejects_empty_dataset():
    arch = mlp2((5,), 3, hidden=4)
    net = init_network(arch, 2)
    empty = Batch(np.zeros((0, 5), np.float32), np.zeros(0, dtype=np.int64))
    with pytest.raises(ShapeError):
        evaluate(net, Mask.ones(net.d), empty)


def test_mask_is_immutable_and_nested():
    outer = Mask([1, 1, 0, 1])
    inner = Mask([1, 0, 0, 1])
    assert inner <= outer
    assert not outer <= inner
    assert outer.surviving == 3
    with pytest.raises(AttributeError):
        outer.bits = np.zeros(4, dtype=bool)
    with pytest.raises(ValueError):
        outer.bits[0] = False
