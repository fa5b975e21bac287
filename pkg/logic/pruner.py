"""
Pruning masks: global unstructured magnitude pruning, structured L1
filter pruning with per-layer densities, and mask algebra.

Counts: unstructured prunes floor(f * surviving); structured keeps
ceil(p^k * out_channels) filters. Ties go to the lower flat index
(unstructured, pruned first) and the lower channel index (structured,
kept first).
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from engine.layers import WEIGHTED_KINDS
from engine.mask import Mask, check_same_length
from engine.network import Architecture, Network
from errors import ConfigurationError, MaskError

DEFAULT_ITERATION_FRACTION = 0.2


def _floor(value: float) -> int:
    # round first so 0.2 * 10 style products land on the intended integer
    return int(math.floor(round(value, 9)))


def _ceil(value: float) -> int:
    return int(math.ceil(round(value, 9)))


@dataclass(frozen=True)
class StructuredRates:
    """Per-layer resulting densities p_i (keyed by layer index) and exponent k."""

    per_layer_density: Dict[int, float]
    exponent: int = 1
    effective: Dict[int, float] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.exponent < 1:
            raise ConfigurationError(f"Exponent k must be a positive integer, got {self.exponent}.")
        effective = {}
        for layer_index, density in self.per_layer_density.items():
            if not 0.0 < density <= 1.0:
                raise ConfigurationError(f"Layer {layer_index} density must lie in (0, 1], got {density}.")
            effective[int(layer_index)] = float(density) ** self.exponent
        object.__setattr__(self, "effective", effective)


# ── mask algebra ─────────────────────────────────────────────────────


def density(m: Mask) -> float:
    """Surviving fraction of weights."""
    if m.d == 0:
        raise MaskError("Density of an empty mask is undefined.")
    return m.surviving / m.d


def compression_ratio(m: Mask) -> float:
    """d / surviving (5% remaining → 20x)."""
    if m.surviving == 0:
        raise MaskError("Compression ratio is undefined when no weights survive.")
    return m.d / m.surviving


def ones_mask(d: int) -> Mask:
    return Mask.ones(d)


def intersect(a: Mask, b: Mask) -> Mask:
    check_same_length(a, b.d)
    return Mask(a.bits & b.bits)


def is_nested(inner: Mask, outer: Mask) -> bool:
    return inner <= outer


def prunable_mask(arch: Architecture, prune_biases: bool = True, prune_final_layer: bool = True) -> Mask:
    """Positions that global pruning may remove."""
    bits = np.ones(arch.d, dtype=bool)
    slices = arch.param_slices()
    for position, param in enumerate(slices):
        if not prune_biases and param.bias is not None:
            bits[param.bias] = False
        if not prune_final_layer and position == len(slices) - 1:
            bits[param.kernel] = False
            if param.bias is not None:
                bits[param.bias] = False
    return Mask(bits)


# ── unstructured ─────────────────────────────────────────────────────


def _prune_lowest(net: Network, current: Mask, count: int, candidates: Optional[Mask]) -> Mask:
    pool = current.bits if candidates is None else current.bits & candidates.bits
    positions = np.flatnonzero(pool)
    if count > positions.size:
        raise MaskError(f"Asked to prune {count} weights but only {positions.size} are prunable.")
    if count == 0:
        return current
    magnitudes = np.abs(net.weights[positions])
    order = np.argsort(magnitudes, kind="stable")
    bits = current.bits.copy()
    bits[positions[order[:count]]] = False
    return Mask(bits)


def global_magnitude_prune(
    net: Network,
    current: Mask,
    fraction: float,
    candidates: Optional[Mask] = None,
) -> Mask:
    """Prune the floor(f * surviving) smallest-magnitude surviving weights.

    Args:
        net: Network whose magnitudes rank the weights.
        current: Mask to prune further; the result is nested inside it.
        fraction: f in (0, 1).
        candidates: Optional pool restriction (see ``prunable_mask``).
    """
    if not 0.0 < fraction < 1.0:
        raise MaskError(f"Pruning fraction must lie in (0, 1), got {fraction}.")
    check_same_length(current, net.d)
    pool = current.bits if candidates is None else current.bits & candidates.bits
    surviving = int(np.count_nonzero(pool))
    if surviving == 0:
        raise MaskError("No surviving weights left to prune.")
    return _prune_lowest(net, current, _floor(fraction * surviving), candidates)


def prune_to_compression(
    net: Network,
    current: Mask,
    ratio: float,
    candidates: Optional[Mask] = None,
) -> Mask:
    """One-shot global prune until floor(d * (1 - 1/ratio)) weights are gone."""
    check_same_length(current, net.d)
    if ratio < 1.0:
        raise MaskError(f"Target compression must be >= 1, got {ratio}.")
    target_pruned = _floor(net.d * (1.0 - 1.0 / ratio))
    already = net.d - current.surviving
    if target_pruned < already:
        raise MaskError(f"Mask already exceeds compression {ratio}x.")
    count = target_pruned - already
    if count >= current.surviving:
        raise MaskError(f"Compression {ratio}x would remove every weight.")
    return _prune_lowest(net, current, count, candidates)


def iterative_mask_sequence(
    trained: Sequence[Network],
    k: int,
    fraction: float = DEFAULT_ITERATION_FRACTION,
    candidates: Optional[Mask] = None,
) -> List[Mask]:
    """m_0 = ones, m_{j+1} = prune(trained[j], m_j, f) for j < k."""
    if k < 0:
        raise MaskError(f"Iteration count must be >= 0, got {k}.")
    if not trained:
        raise MaskError("Need at least one network to size the mask.")
    if len(trained) < k:
        raise MaskError(f"{k} iterations need {k} trained networks, got {len(trained)}.")
    masks = [Mask.ones(trained[0].d)]
    for j in range(k):
        masks.append(global_magnitude_prune(trained[j], masks[-1], fraction, candidates))
    return masks


# ── structured ───────────────────────────────────────────────────────


def _next_weighted_layer(arch: Architecture, index: int) -> Optional[int]:
    for nxt in range(index + 1, len(arch.layers)):
        if arch.layers[nxt].kind in WEIGHTED_KINDS:
            return nxt
    return None


def kept_filters(net: Network, layer_index: int, layer_density: float) -> np.ndarray:
    """Sorted channel indices kept by L1-norm ranking at the given density."""
    layer = net.layers[layer_index]
    norms = np.abs(net.kernel(layer_index)).reshape(layer.out_channels, -1).sum(axis=1)
    keep = max(1, _ceil(layer_density * layer.out_channels))
    channels = np.arange(layer.out_channels)
    order = np.lexsort((channels, -norms))
    return np.sort(order[:keep])


def structured_filter_prune(net: Network, rates: StructuredRates) -> Mask:
    """Zero whole conv filters with the smallest kernel L1 norms.

    Each pruned filter loses its kernel slice and bias, and the next conv
    or dense layer loses the matching input-channel slice.
    """
    arch = net.arch
    slices = {param.layer_index: param for param in arch.param_slices()}
    bits = np.ones(net.d, dtype=bool)

    for layer_index in sorted(rates.effective):
        if layer_index >= len(arch.layers) or arch.layers[layer_index].kind != "conv2d":
            kind = arch.layers[layer_index].kind if layer_index < len(arch.layers) else "missing"
            raise ConfigurationError(f"Structured rate given for layer {layer_index} ({kind}); only conv2d layers qualify.")
        layer = arch.layers[layer_index]
        keep = kept_filters(net, layer_index, rates.effective[layer_index])
        dropped = np.setdiff1d(np.arange(layer.out_channels), keep)
        if dropped.size == 0:
            continue

        param = slices[layer_index]
        kernel_bits = bits[param.kernel].reshape(layer.out_channels, -1)
        kernel_bits[dropped] = False
        bits[param.kernel] = kernel_bits.reshape(-1)
        if param.bias is not None:
            bias_bits = bits[param.bias]
            bias_bits[dropped] = False
            bits[param.bias] = bias_bits

        nxt = _next_weighted_layer(arch, layer_index)
        if nxt is None:
            continue
        nxt_layer = arch.layers[nxt]
        nxt_bits = bits[slices[nxt].kernel].reshape(nxt_layer.kernel_shape)
        if nxt_layer.kind == "conv2d":
            nxt_bits[:, dropped] = False
        else:
            # the dense layer reads a flattened (C, H, W) map
            spatial = nxt_layer.in_features // layer.out_channels
            grouped = nxt_bits.reshape(nxt_layer.out_features, layer.out_channels, spatial)
            grouped[:, dropped, :] = False
            nxt_bits = grouped.reshape(nxt_layer.kernel_shape)
        bits[slices[nxt].kernel] = nxt_bits.reshape(-1)

    return Mask(bits)


def remove_pruned_filters(net: Network, m: Mask) -> Network:
    """Physically drop conv filters whose kernel is fully masked.

    Returns a smaller network whose forward pass equals the masked one.
    """
    check_same_length(m, net.d)
    arch = net.arch
    slices = {param.layer_index: param for param in arch.param_slices()}
    effective = net.weights * m.values

    kept_out: Dict[int, np.ndarray] = {}
    for index, layer in enumerate(arch.layers):
        if layer.kind != "conv2d":
            continue
        kernel_bits = m.bits[slices[index].kernel].reshape(layer.out_channels, -1)
        alive = np.flatnonzero(kernel_bits.any(axis=1))
        kept_out[index] = alive if alive.size else np.array([0])

    new_layers = list(arch.layers)
    pieces: List[np.ndarray] = []
    incoming: Optional[np.ndarray] = None  # kept channels feeding the current layer
    spatial = 1
    for index, layer in enumerate(arch.layers):
        if layer.kind not in WEIGHTED_KINDS:
            if layer.kind == "flatten" and incoming is not None:
                shape = arch.shapes[index - 1]
                spatial = int(np.prod(shape[1:]))
            continue
        param = slices[index]
        kernel = effective[param.kernel].reshape(layer.kernel_shape)
        bias = effective[param.bias] if param.bias is not None else None

        if layer.kind == "conv2d":
            out_keep = kept_out[index]
            in_keep = incoming if incoming is not None else np.arange(layer.in_channels)
            kernel = kernel[out_keep][:, in_keep]
            if bias is not None:
                bias = bias[out_keep]
            new_layers[index] = layer.with_channels(in_keep.size, out_keep.size)
            incoming = out_keep
        else:
            if incoming is not None:
                columns = (incoming[:, None] * spatial + np.arange(spatial)[None, :]).reshape(-1)
                kernel = kernel[:, columns]
                new_layers[index] = layer.with_channels(columns.size, layer.out_features)
            incoming = None
        pieces.append(np.ascontiguousarray(kernel).reshape(-1))
        if bias is not None:
            pieces.append(bias)

    new_arch = Architecture(arch.input_shape, tuple(new_layers))
    return Network(new_arch, np.concatenate(pieces).astype(net.weights.dtype))
