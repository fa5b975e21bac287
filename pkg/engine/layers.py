"""
Layer specifications and per-kind forward/backward kernels.

All kernels are plain numpy on contiguous arrays. Reductions go through
fixed-shape ``sum``/``matmul`` calls so identical inputs always give
identical bits. Shapes here are per-example (no batch axis).
"""

from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigurationError, ShapeError

LAYER_KINDS = ("dense", "conv2d", "relu", "avgpool2d", "flatten")
WEIGHTED_KINDS = ("dense", "conv2d")

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one layer. Fields that do not apply to a kind stay 0."""

    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    has_bias: bool = False

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"Unknown layer kind '{self.kind}'.")
        if self.kind == "dense" and (self.in_features <= 0 or self.out_features <= 0):
            raise ConfigurationError("Dense layers need positive in_features and out_features.")
        if self.kind == "conv2d":
            dims = (self.in_channels, self.out_channels, self.kernel_h, self.kernel_w, self.stride)
            if min(dims) <= 0 or self.padding < 0:
                raise ConfigurationError("Conv2d geometry must be positive (padding >= 0).")
        if self.kind == "avgpool2d" and (self.window <= 0 or self.stride <= 0):
            raise ConfigurationError("Avgpool2d needs positive window and stride.")

    # ── constructors ─────────────────────────────────────────────────

    @classmethod
    def dense(cls, in_features: int, out_features: int, has_bias: bool = True) -> "LayerSpec":
        return cls("dense", in_features=in_features, out_features=out_features, has_bias=has_bias)

    @classmethod
    def conv2d(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
        padding: int = 0,
        has_bias: bool = True,
    ) -> "LayerSpec":
        return cls(
            "conv2d",
            in_channels=in_channels,
            out_channels=out_channels,
            kernel_h=kernel,
            kernel_w=kernel,
            stride=stride,
            padding=padding,
            has_bias=has_bias,
        )

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls("relu")

    @classmethod
    def avgpool2d(cls, window: int, stride: Optional[int] = None) -> "LayerSpec":
        return cls("avgpool2d", window=window, stride=stride or window)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls("flatten")

    # ── parameter geometry ───────────────────────────────────────────

    @property
    def kernel_shape(self) -> Shape:
        if self.kind == "dense":
            return (self.out_features, self.in_features)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
        return ()

    @property
    def kernel_size(self) -> int:
        return int(np.prod(self.kernel_shape)) if self.kernel_shape else 0

    @property
    def bias_size(self) -> int:
        if not self.has_bias:
            return 0
        if self.kind == "dense":
            return self.out_features
        if self.kind == "conv2d":
            return self.out_channels
        return 0

    @property
    def param_count(self) -> int:
        return self.kernel_size + self.bias_size

    @property
    def fan_in(self) -> int:
        if self.kind == "dense":
            return self.in_features
        if self.kind == "conv2d":
            return self.in_channels * self.kernel_h * self.kernel_w
        return 0

    def output_shape(self, input_shape: Shape) -> Shape:
        """Per-example output shape; raises ShapeError if the input does not fit."""
        if self.kind == "dense":
            if tuple(input_shape) != (self.in_features,):
                raise ShapeError(f"dense expects ({self.in_features},), got {tuple(input_shape)}")
            return (self.out_features,)
        if self.kind == "relu":
            return tuple(input_shape)
        if self.kind == "flatten":
            return (int(np.prod(input_shape)),)
        if len(input_shape) != 3:
            raise ShapeError(f"{self.kind} expects (C, H, W), got {tuple(input_shape)}")
        channels, height, width = input_shape
        if self.kind == "conv2d":
            if channels != self.in_channels:
                raise ShapeError(f"conv2d expects {self.in_channels} channels, got {channels}")
            out_h = (height + 2 * self.padding - self.kernel_h) // self.stride + 1
            out_w = (width + 2 * self.padding - self.kernel_w) // self.stride + 1
            if out_h < 1 or out_w < 1:
                raise ShapeError(f"conv2d kernel larger than padded input {tuple(input_shape)}")
            return (self.out_channels, out_h, out_w)
        out_h = (height - self.window) // self.stride + 1
        out_w = (width - self.window) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"avgpool2d window larger than input {tuple(input_shape)}")
        return (channels, out_h, out_w)

    def with_channels(self, in_size: int, out_size: int) -> "LayerSpec":
        """Copy with input/output width replaced (used when shrinking networks)."""
        if self.kind == "dense":
            return replace(self, in_features=in_size, out_features=out_size)
        if self.kind == "conv2d":
            return replace(self, in_channels=in_size, out_channels=out_size)
        return self

    def to_dict(self) -> Dict[str, object]:
        fields = {"kind": self.kind}
        if self.kind == "dense":
            fields.update(in_features=self.in_features, out_features=self.out_features, has_bias=self.has_bias)
        elif self.kind == "conv2d":
            fields.update(
                in_channels=self.in_channels,
                out_channels=self.out_channels,
                kernel_h=self.kernel_h,
                kernel_w=self.kernel_w,
                stride=self.stride,
                padding=self.padding,
                has_bias=self.has_bias,
            )
        elif self.kind == "avgpool2d":
            fields.update(window=self.window, stride=self.stride)
        return fields


# ── forward kernels ──────────────────────────────────────────────────


def _im2col(x: np.ndarray, spec: LayerSpec) -> Tuple[np.ndarray, int, int]:
    if spec.padding:
        pad = spec.padding
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    windows = windows[:, :, :: spec.stride, :: spec.stride]
    n, channels, out_h, out_w = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, channels * spec.kernel_h * spec.kernel_w)
    return np.ascontiguousarray(cols), out_h, out_w


def layer_forward(
    spec: LayerSpec,
    x: np.ndarray,
    kernel: Optional[np.ndarray],
    bias: Optional[np.ndarray],
) -> Tuple[np.ndarray, object]:
    """Run one layer on a batch. Returns (output, cache for backward)."""
    if spec.kind == "dense":
        y = x @ kernel.T
        if bias is not None:
            y = y + bias
        return y, x

    if spec.kind == "conv2d":
        n = x.shape[0]
        cols, out_h, out_w = _im2col(x, spec)
        y = cols @ kernel.reshape(spec.out_channels, -1).T
        if bias is not None:
            y = y + bias
        y = np.ascontiguousarray(y.reshape(n, out_h, out_w, spec.out_channels).transpose(0, 3, 1, 2))
        return y, (cols, x.shape, out_h, out_w)

    if spec.kind == "relu":
        return np.maximum(x, 0), x

    if spec.kind == "avgpool2d":
        windows = sliding_window_view(x, (spec.window, spec.window), axis=(2, 3))
        windows = windows[:, :, :: spec.stride, :: spec.stride]
        area = x.dtype.type(spec.window * spec.window)
        y = np.ascontiguousarray(windows.sum(axis=(-2, -1)) / area)
        return y, x.shape

    # flatten
    return x.reshape(x.shape[0], -1), x.shape


# ── backward kernels ─────────────────────────────────────────────────


def layer_backward(
    spec: LayerSpec,
    dy: np.ndarray,
    kernel: Optional[np.ndarray],
    cache: object,
) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """Backpropagate through one layer. Returns (dx, dkernel, dbias)."""
    if spec.kind == "dense":
        x = cache
        dkernel = dy.T @ x
        dbias = dy.sum(axis=0) if spec.has_bias else None
        return dy @ kernel, dkernel, dbias

    if spec.kind == "conv2d":
        cols, x_shape, out_h, out_w = cache
        n, channels, height, width = x_shape
        dy_rows = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, spec.out_channels)
        kernel_mat = kernel.reshape(spec.out_channels, -1)
        dkernel = (dy_rows.T @ cols).reshape(kernel.shape)
        dbias = dy_rows.sum(axis=0) if spec.has_bias else None
        dcols = (dy_rows @ kernel_mat).reshape(n, out_h, out_w, channels, spec.kernel_h, spec.kernel_w)

        pad, step = spec.padding, spec.stride
        dx_padded = np.zeros((n, channels, height + 2 * pad, width + 2 * pad), dtype=dy.dtype)
        for i in range(spec.kernel_h):
            for j in range(spec.kernel_w):
                dx_padded[:, :, i : i + step * out_h : step, j : j + step * out_w : step] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dx_padded[:, :, pad : pad + height, pad : pad + width]
        return np.ascontiguousarray(dx), dkernel, dbias

    if spec.kind == "relu":
        x = cache
        return dy * (x > 0), None, None

    if spec.kind == "avgpool2d":
        x_shape = cache
        out_h, out_w = dy.shape[2], dy.shape[3]
        area = dy.dtype.type(spec.window * spec.window)
        share = dy / area
        dx = np.zeros(x_shape, dtype=dy.dtype)
        step = spec.stride
        for i in range(spec.window):
            for j in range(spec.window):
                dx[:, :, i : i + step * out_h : step, j : j + step * out_w : step] += share
        return dx, None, None

    # flatten
    return dy.reshape(cache), None, None
