"""
Masked Nesterov SGD with L2 weight decay.

Update per step (decay folded into the gradient, then masked):
    g = (grad + wd * w) * m
    v = (beta * v + g) * m
    w = (w - lr * (g + beta * v)) * m
"""

from dataclasses import dataclass

import numpy as np

from engine.mask import Mask, check_same_length
from engine.network import Network
from errors import ConfigurationError, NumericalError


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Momentum buffer in the weight layout plus a step counter."""

    velocity: np.ndarray
    steps: int = 0

    @classmethod
    def zeros(cls, d: int, dtype=np.float32) -> "OptimizerState":
        return cls(np.zeros(d, dtype=dtype), 0)


def sgd_step(
    net: Network,
    mask: Mask,
    grad: np.ndarray,
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
):
    """Apply one masked Nesterov step.

    Returns:
        (updated Network, updated OptimizerState). Pruned positions of both
        the weights and the velocity are exactly 0 afterwards.
    """
    if lr < 0:
        raise ConfigurationError(f"Learning rate must be >= 0, got {lr}.")
    check_same_length(mask, net.d)
    if grad.shape != net.weights.shape:
        raise ConfigurationError(f"Gradient shape {grad.shape} does not match weights {net.weights.shape}.")
    finite = np.isfinite(grad)
    if not finite.all():
        bad = np.flatnonzero(~finite)
        raise NumericalError(
            f"Non-finite gradient at {bad.size} positions (first index {int(bad[0])}, "
            f"value {grad[bad[0]]}) after {state.steps} steps."
        )

    dtype = net.weights.dtype.type
    mask_values = mask.as_dtype(net.weights.dtype)
    beta = dtype(momentum)

    g = (grad + dtype(weight_decay) * net.weights) * mask_values
    velocity = (beta * state.velocity + g) * mask_values
    weights = (net.weights - dtype(lr) * (g + beta * velocity)) * mask_values
    return net.with_weights(weights), OptimizerState(velocity, state.steps + 1)
