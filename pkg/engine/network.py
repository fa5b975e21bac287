"""
Network container plus forward, backward and evaluation passes.

Parameter layout is fixed: layers in order, within a layer kernel then
bias, kernels in [out, in, kh, kw] order. Every pass runs on the masked
weights ``W * m``; the raw weights are never used directly.
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

from engine.layers import WEIGHTED_KINDS, LayerSpec, Shape, layer_backward, layer_forward
from engine.mask import Mask, check_same_length
from errors import ConfigurationError, NumericalError, ShapeError


@dataclass(frozen=True)
class ParamSlice:
    """Where one weighted layer lives inside the flat weight vector."""

    layer_index: int
    kernel: slice
    bias: Optional[slice]


@dataclass(frozen=True)
class Architecture:
    """Input shape plus the ordered layer list; validated on construction."""

    input_shape: Shape
    layers: Tuple[LayerSpec, ...]
    shapes: Tuple[Shape, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", validate_architecture(self.input_shape, self.layers))

    @property
    def d(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    @property
    def num_classes(self) -> int:
        return int(self.shapes[-1][0])

    def param_slices(self) -> List[ParamSlice]:
        slices = []
        offset = 0
        for index, layer in enumerate(self.layers):
            if layer.kind not in WEIGHTED_KINDS:
                continue
            kernel = slice(offset, offset + layer.kernel_size)
            offset += layer.kernel_size
            bias = None
            if layer.bias_size:
                bias = slice(offset, offset + layer.bias_size)
                offset += layer.bias_size
            slices.append(ParamSlice(index, kernel, bias))
        return slices


def validate_architecture(input_shape: Shape, layers: Iterable[LayerSpec]) -> Tuple[Shape, ...]:
    """Propagate shapes through the layers.

    Returns:
        Per-layer output shapes.

    Raises:
        ConfigurationError naming the layer pair whose shapes disagree.
    """
    layers = list(layers)
    if not layers:
        raise ConfigurationError("Architecture has no layers.")
    shapes = []
    current = tuple(input_shape)
    for index, layer in enumerate(layers):
        try:
            current = layer.output_shape(current)
        except ShapeError as exc:
            previous = "input" if index == 0 else f"layer {index - 1} ({layers[index - 1].kind})"
            raise ConfigurationError(
                f"Incompatible shapes between {previous} and layer {index} ({layer.kind}): {exc}"
            ) from exc
        shapes.append(current)
    if len(shapes[-1]) != 1:
        raise ConfigurationError(f"Last layer must emit class logits, got shape {shapes[-1]}.")
    return tuple(shapes)


@dataclass(frozen=True, eq=False)
class Network:
    """An architecture and its flat weight vector W."""

    arch: Architecture
    weights: np.ndarray

    def __post_init__(self) -> None:
        if self.weights.ndim != 1 or self.weights.size != self.arch.d:
            raise ConfigurationError(
                f"Weight vector has {self.weights.size} entries, architecture needs {self.arch.d}."
            )

    @property
    def d(self) -> int:
        return int(self.weights.size)

    @property
    def layers(self) -> Tuple[LayerSpec, ...]:
        return self.arch.layers

    def with_weights(self, weights: np.ndarray) -> "Network":
        return Network(self.arch, weights)

    def astype(self, dtype) -> "Network":
        return Network(self.arch, self.weights.astype(dtype))

    def kernel(self, layer_index: int) -> np.ndarray:
        """Reshaped view of one layer's kernel (raw, unmasked)."""
        for param in self.arch.param_slices():
            if param.layer_index == layer_index:
                return self.weights[param.kernel].reshape(self.layers[layer_index].kernel_shape)
        raise ConfigurationError(f"Layer {layer_index} has no kernel.")


@dataclass(frozen=True, eq=False)
class Batch:
    """Inputs [n, ...] and integer labels of length n."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels.")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, indices: np.ndarray) -> "Batch":
        return Batch(self.inputs[indices], self.labels[indices])


def layer_slices(net: Network) -> List[ParamSlice]:
    """(layer index, kernel slice, bias slice) for every weighted layer of ``net``."""
    return net.arch.param_slices()


def init_network(arch: Architecture, seed: int) -> Network:
    """Kaiming-uniform kernels (bound sqrt(6 / fan_in)) and zero biases.

    Identical (arch, seed) pairs give bit-identical weight vectors.
    """
    rng = np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    weights = np.zeros(arch.d, dtype=np.float32)
    for param in arch.param_slices():
        layer = arch.layers[param.layer_index]
        bound = np.sqrt(6.0 / layer.fan_in)
        weights[param.kernel] = rng.uniform(-bound, bound, size=layer.kernel_size).astype(np.float32)
    return Network(arch, weights)


# ── passes ───────────────────────────────────────────────────────────


def _check_inputs(net: Network, mask: Mask, batch: Batch) -> None:
    check_same_length(mask, net.d)
    if len(batch) < 1:
        raise ShapeError("Batch is empty.")
    if tuple(batch.inputs.shape[1:]) != net.arch.input_shape:
        raise ShapeError(
            f"Batch example shape {tuple(batch.inputs.shape[1:])} does not match "
            f"network input {net.arch.input_shape}."
        )
    if not np.all(np.isfinite(batch.inputs)):
        raise NumericalError("Batch contains non-finite inputs.")
    num_classes = net.arch.num_classes
    if batch.labels.min() < 0 or batch.labels.max() >= num_classes:
        raise ShapeError(f"Labels must lie in [0, {num_classes}).")


def _layer_params(net: Network, effective: np.ndarray):
    params = {}
    for param in net.arch.param_slices():
        layer = net.layers[param.layer_index]
        kernel = effective[param.kernel].reshape(layer.kernel_shape)
        bias = effective[param.bias] if param.bias is not None else None
        params[param.layer_index] = (kernel, bias)
    return params


def _run_layers(net: Network, params, x: np.ndarray):
    caches = []
    for index, layer in enumerate(net.layers):
        kernel, bias = params.get(index, (None, None))
        x, cache = layer_forward(layer, x, kernel, bias)
        caches.append(cache)
    return x, caches


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and the softmax probabilities."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    rows = np.arange(labels.shape[0])
    loss = -log_probs[rows, labels].mean()
    return float(loss), exp / total


def forward(net: Network, mask: Mask, batch: Batch) -> Tuple[np.ndarray, float]:
    """Logits and mean softmax cross-entropy of W * m on a batch."""
    _check_inputs(net, mask, batch)
    effective = net.weights * mask.as_dtype(net.weights.dtype)
    x = batch.inputs.astype(net.weights.dtype, copy=False)
    logits, _ = _run_layers(net, _layer_params(net, effective), x)
    loss, _ = _cross_entropy(logits, batch.labels)
    return logits, loss


def loss_and_gradient(net: Network, mask: Mask, batch: Batch) -> Tuple[float, np.ndarray]:
    """Loss and dLoss/dW evaluated at W * m, zeroed at pruned positions."""
    _check_inputs(net, mask, batch)
    mask_values = mask.as_dtype(net.weights.dtype)
    effective = net.weights * mask_values
    x = batch.inputs.astype(net.weights.dtype, copy=False)
    params = _layer_params(net, effective)
    logits, caches = _run_layers(net, params, x)
    loss, probs = _cross_entropy(logits, batch.labels)

    n = batch.labels.shape[0]
    grad_out = probs
    grad_out[np.arange(n), batch.labels] -= 1
    grad_out = grad_out / net.weights.dtype.type(n)

    gradient = np.zeros_like(net.weights)
    slices = {param.layer_index: param for param in net.arch.param_slices()}
    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        kernel = params[index][0] if index in params else None
        grad_out, dkernel, dbias = layer_backward(layer, grad_out, kernel, caches[index])
        if index in slices:
            gradient[slices[index].kernel] = dkernel.reshape(-1)
            if dbias is not None:
                gradient[slices[index].bias] = dbias
    return loss, gradient * mask_values


def backward(net: Network, mask: Mask, batch: Batch) -> np.ndarray:
    """Gradient of the loss w.r.t. W at W * m; exactly 0 where the mask is 0."""
    _, gradient = loss_and_gradient(net, mask, batch)
    return gradient


def iter_batches(data: Batch, batch_size: int, order: Optional[np.ndarray] = None):
    """Yield consecutive batches of ``data`` (optionally permuted); last one may be short."""
    n = len(data)
    indices = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield data.take(indices[start : start + batch_size])


def evaluate(
    net: Network,
    mask: Mask,
    dataset: Union[Batch, Iterable[Batch]],
    batch_size: int = 1000,
) -> float:
    """Fraction of argmax-correct predictions under W * m (ties → lowest class)."""
    stream = iter_batches(dataset, batch_size) if isinstance(dataset, Batch) else dataset
    correct = 0
    seen = 0
    for batch in stream:
        logits, _ = forward(net, mask, batch)
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == batch.labels))
        seen += len(batch)
    if seen == 0:
        raise ShapeError("Cannot evaluate on an empty dataset.")
    return correct / seen
