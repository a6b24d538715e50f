"""Kolmogorov-Arnold layers: learnable per-edge activation functions built
from B-spline bases plus a silu base branch, and the plain MLP layer used by
the block-type ablation.

Each edge function is phi(x) = w_base * silu(x) + w_spline * sum_i c_i B_i(x)
over a fixed uniform knot grid (no grid refinement). A layer applies one phi
per (output, input) edge and sums over inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .module import Module
from .tensor import Tensor, ShapeError, matmul, record, silu, transpose, _flops


@dataclass(frozen=True)
class SplineSpec:
    """Uniform B-spline basis layout.

    grid_size intervals of degree-`order` splines span [low, high]; the knot
    vector extends `order` intervals past each end, giving grid_size + 2*order
    + 1 knots and grid_size + order basis functions.
    """
    grid_size: int = 5
    order: int = 3
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValueError(f"grid_size must be positive, got {self.grid_size}")
        if self.order < 0:
            raise ValueError(f"order must be non-negative, got {self.order}")
        if not self.low < self.high:
            raise ValueError(f"empty grid range [{self.low}, {self.high}]")

    @property
    def n_bases(self) -> int:
        return self.grid_size + self.order

    def knots(self) -> np.ndarray:
        step = (self.high - self.low) / self.grid_size
        n = self.grid_size + 2 * self.order + 1
        return self.low + step * (np.arange(n) - self.order)


def _cox_de_boor_levels(x: np.ndarray, spec: SplineSpec):
    """All basis levels 0..order at x; levels[d] has grid_size+2*order-d
    functions along the last axis."""
    t = spec.knots().astype(x.dtype)
    xv = x[..., None]
    levels = [((xv >= t[:-1]) & (xv < t[1:])).astype(x.dtype)]
    for d in range(1, spec.order + 1):
        b = levels[-1]
        left = (xv - t[:-(d + 1)]) / (t[d:-1] - t[:-(d + 1)]) * b[..., :-1]
        right = (t[d + 1:] - xv) / (t[d + 1:] - t[1:-d]) * b[..., 1:]
        levels.append(left + right)
    return levels


def bspline_basis(x: Tensor, spec: SplineSpec) -> Tensor:
    """Evaluate all grid_size+order basis functions at each element of x.

    Output shape is x.shape + (n_bases,). Inputs outside [low, high] are fine:
    the same recursion applies and bases simply decay to zero support.
    Differentiable in x via dB_i^k/dx = k*(B_i^{k-1}/(t_{i+k}-t_i) -
    B_{i+1}^{k-1}/(t_{i+k+1}-t_{i+1})).

    FLOP model (used by count_flops): per element, grid_size+2*order interval
    tests plus 8 flops per surviving basis per recursion level.
    """
    levels = _cox_de_boor_levels(x.data, spec)
    out = levels[-1]
    g, k = spec.grid_size, spec.order
    _flops(x.size * (g + 2 * k + 8 * sum(g + 2 * k - d for d in range(1, k + 1))))

    if k == 0:
        bwd = lambda grad: (np.zeros_like(x.data),)
    else:
        t = spec.knots().astype(x.dtype)
        lower = levels[-2]
        dleft = float(k) / (t[k:-1] - t[:-(k + 1)])
        dright = float(k) / (t[k + 1:] - t[1:-k])

        def bwd(grad):
            deriv = lower[..., :-1] * dleft - lower[..., 1:] * dright
            return ((grad * deriv).sum(axis=-1),)

    return record("bspline_basis", (x,), out, bwd)


def _kaiming_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / n_in)
    return rng.uniform(-bound, bound, size=(n_out, n_in))


class KanLayer(Module):
    """One Kolmogorov-Arnold layer: n_in x n_out learnable edge functions.

    out[b, q] = sum_p base_weight[q,p]*silu(x[b,p])
                + spline_scale[q,p] * sum_i coeffs[q,p,i]*B_i(x[b,p])
    """

    def __init__(self, n_in: int, n_out: int, spec: SplineSpec = SplineSpec(),
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.n_in = n_in
        self.n_out = n_out
        self.spec = spec
        nb = spec.n_bases
        # coeffs start small so the layer opens near its silu-linear baseline
        self.spline_coeffs = Tensor(
            rng.normal(0.0, 0.1 / math.sqrt(nb), size=(n_out, n_in, nb)),
            requires_grad=True)
        self.base_weight = Tensor(_kaiming_uniform(rng, n_out, n_in),
                                  requires_grad=True)
        self.spline_scale = Tensor(np.ones((n_out, n_in)), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"KanLayer: expected (batch, {self.n_in}), got {x.shape}")
        batch = x.shape[0]
        base = matmul(silu(x), transpose(self.base_weight))
        bases = bspline_basis(x, self.spec)                      # (B, n_in, nb)
        edge = self.spline_coeffs * self.spline_scale.reshape(
            self.n_out, self.n_in, 1)
        spline = matmul(bases.reshape(batch, self.n_in * self.spec.n_bases),
                        transpose(edge.reshape(self.n_out, -1)))
        return base + spline


class KanStack(Module):
    """Composition of KAN layers; consecutive dims must chain."""

    def __init__(self, dims: list[int], spec: SplineSpec = SplineSpec(),
                 rng: np.random.Generator | None = None):
        super().__init__()
        if len(dims) < 2:
            raise ValueError(f"need at least one layer, got dims={dims}")
        self.layers = [KanLayer(a, b, spec=spec, rng=rng)
                       for a, b in zip(dims, dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def kan_stack_forward(x: Tensor, layers: list[KanLayer]) -> Tensor:
    """Apply already-built KAN layers in order, validating the dim chain."""
    for i, (a, b) in enumerate(zip(layers, layers[1:])):
        if a.n_out != b.n_in:
            raise ShapeError(f"layer {i} outputs {a.n_out} features but "
                             f"layer {i + 1} expects {b.n_in}")
    for layer in layers:
        x = layer(x)
    return x


_ACTIVATIONS = {
    "linear": lambda t: t,
    "relu": lambda t: t.relu(),
    "silu": lambda t: t.silu(),
}


class MlpLayer(Module):
    """Affine layer with a fixed activation; the KAN-vs-MLP ablation swaps
    this in for KanLayer inside tokenized blocks."""

    def __init__(self, n_in: int, n_out: int, activation: str = "silu",
                 rng: np.random.Generator | None = None):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; "
                             f"choose from {sorted(_ACTIVATIONS)}")
        rng = rng if rng is not None else np.random.default_rng()
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.weight = Tensor(_kaiming_uniform(rng, n_out, n_in), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"MlpLayer: expected (batch, {self.n_in}), got {x.shape}")
        return _ACTIVATIONS[self.activation](matmul(x, transpose(self.weight))
                                             + self.bias)


class MlpStack(Module):
    """Composition of MLP layers mirroring KanStack."""

    def __init__(self, dims: list[int], activation: str = "silu",
                 rng: np.random.Generator | None = None):
        super().__init__()
        if len(dims) < 2:
            raise ValueError(f"need at least one layer, got dims={dims}")
        self.layers = [MlpLayer(a, b, activation=activation, rng=rng)
                       for a, b in zip(dims, dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
