"""Desk-scale reference architectures."""

from typing import Sequence

from engine.layers import LayerSpec
from engine.network import Architecture
from errors import ConfigurationError

ARCHITECTURES = ("mlp2", "conv4")


def mlp2(input_shape: Sequence[int] = (784,), num_classes: int = 10, hidden: int = 64) -> Architecture:
    """MLP-2: flatten, dense -> hidden, relu, dense -> classes."""
    features = 1
    for dim in input_shape:
        features *= int(dim)
    return Architecture(
        tuple(input_shape),
        (
            LayerSpec.flatten(),
            LayerSpec.dense(features, hidden),
            LayerSpec.relu(),
            LayerSpec.dense(hidden, num_classes),
        ),
    )


def conv4(
    input_shape: Sequence[int] = (1, 8, 8),
    num_classes: int = 4,
    hidden: int = 64,
    channels: Sequence[int] = (8, 16),
) -> Architecture:
    """Conv-4: two 3x3 convs, 2x2 average pool, two dense layers."""
    if len(input_shape) != 3:
        raise ConfigurationError(f"conv4 needs a (C, H, W) input shape, got {tuple(input_shape)}.")
    in_channels, height, width = (int(v) for v in input_shape)
    first, second = (int(c) for c in channels)
    pooled = second * (height // 2) * (width // 2)
    return Architecture(
        (in_channels, height, width),
        (
            LayerSpec.conv2d(in_channels, first, kernel=3, padding=1),
            LayerSpec.relu(),
            LayerSpec.conv2d(first, second, kernel=3, padding=1),
            LayerSpec.relu(),
            LayerSpec.avgpool2d(2),
            LayerSpec.flatten(),
            LayerSpec.dense(pooled, hidden),
            LayerSpec.relu(),
            LayerSpec.dense(hidden, num_classes),
        ),
    )


def build_architecture(
    name: str,
    input_shape: Sequence[int],
    num_classes: int,
    hidden: int = 64,
) -> Architecture:
    """Look up a reference architecture by name."""
    key = name.lower().replace("-", "").replace("_", "")
    if key == "mlp2":
        return mlp2(input_shape, num_classes, hidden)
    if key == "conv4":
        return conv4(input_shape, num_classes, hidden)
    raise ConfigurationError(f"Unknown architecture '{name}'. Choose one of: {', '.join(ARCHITECTURES)}.")
