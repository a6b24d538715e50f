"""Convolutional and normalization layers used by the encoder/decoder blocks.

Normalization layers are composed from tensor primitives, so their gradients
come straight from the recorded graph; only BatchNorm carries state (running
statistics, updated outside the graph during training steps).
"""
from __future__ import annotations

import math

import numpy as np

from .module import Module
from .tensor import (
    Tensor, ShapeError, conv2d, matmul, maxpool2x2, no_grad, transpose,
    upsample_bilinear2x,
)

__all__ = [
    "Conv2d", "depthwise_conv3x3", "Linear", "BatchNorm2d", "LayerNorm",
    "activation", "maxpool2x2", "upsample_bilinear2x",
]


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Conv layer over NCHW maps; groups == channels gives the depthwise case."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 0, groups: int = 1,
                 bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError(f"Conv2d: groups={groups} must divide channels "
                             f"{in_channels}->{out_channels}")
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.weight = Tensor(
            _he_uniform(rng, (out_channels, in_channels // groups,
                              kernel_size, kernel_size), fan_in),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, groups=self.groups)


def depthwise_conv3x3(channels: int, rng=None) -> Conv2d:
    """Per-channel 3x3 convolution, padding 1, stride 1."""
    return Conv2d(channels, channels, kernel_size=3, stride=1, padding=1,
                  groups=channels, rng=rng)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_he_uniform(rng, (out_features, in_features),
                                         in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, transpose(self.weight)) + self.bias


class BatchNorm2d(Module):
    """Per-channel batch normalization for NCHW maps.

    Training mode normalizes with batch statistics (biased variance) and
    updates running stats with the configured momentum; eval mode applies the
    running stats. A training batch of one image is rejected.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm2d: expected (B, {self.channels}, H, W), "
                             f"got {x.shape}")
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("BatchNorm2d: training mode needs batch size >= 2")
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x - mu) ** 2.0).mean(axis=(0, 2, 3), keepdims=True)
            with no_grad():
                m = self.momentum
                self.running_mean = ((1.0 - m) * self.running_mean
                                     + m * mu.data.reshape(-1))
                self.running_var = ((1.0 - m) * self.running_var
                                    + m * var.data.reshape(-1))
        else:
            mu = Tensor(self.running_mean.reshape(1, -1, 1, 1))
            var = Tensor(self.running_var.reshape(1, -1, 1, 1))
        xhat = (x - mu) / ((var + self.eps) ** 0.5)
        return (xhat * self.gamma.reshape(1, -1, 1, 1)
                + self.beta.reshape(1, -1, 1, 1))


class LayerNorm(Module):
    """Normalization over the last (feature) dimension."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"LayerNorm: last dim {x.shape[-1]} != {self.dim}")
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2.0).mean(axis=-1, keepdims=True)
        xhat = (x - mu) / ((var + self.eps) ** 0.5)
        return xhat * self.gamma + self.beta


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return x.relu()
    if kind == "silu":
        return x.silu()
    raise ValueError(f"unknown activation kind {kind!r}")
