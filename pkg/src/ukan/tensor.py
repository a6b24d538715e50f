"""Dense tensors with reverse-mode automatic differentiation.

Every operation below is a primitive: it computes its result with numpy and,
when gradients are enabled and any input requires them, records a node on the
active tape (`Graph`). `backward()` replays the tape in reverse and accumulates
gradients into leaf tensors.

Precision is a process-wide setting (`set_default_dtype`), chosen at run start
and never mixed within one graph: float64 for gradient checks and oracles,
float32 for faster training runs.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes invalid for an op; message names the op and dims."""


# --------------------------------------------------------------------------
# global run options
# --------------------------------------------------------------------------

_dtype = np.float64
_grad_enabled = True
_debug_nonfinite = False
_flop_counter = None


def set_default_dtype(kind) -> None:
    """Select process-wide float precision ('float64' or 'float32')."""
    global _dtype
    dt = np.dtype(kind)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {kind!r}; use float32 or float64")
    _dtype = dt.type


def default_dtype():
    return np.dtype(_dtype)


def set_debug_nonfinite(enabled: bool) -> None:
    """Trap NaN/Inf op outputs: every primitive raises on a non-finite result."""
    global _debug_nonfinite
    _debug_nonfinite = bool(enabled)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (eval/sampling/optimizer code)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class FlopCounter:
    """Accumulates the documented FLOP cost of every primitive executed."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


@contextmanager
def count_flops():
    """Count FLOPs of all primitives run inside the block (2*MACs for matmul
    and conv, per-element costs for pointwise ops and spline bases)."""
    global _flop_counter
    prev = _flop_counter
    counter = FlopCounter()
    _flop_counter = counter
    try:
        yield counter
    finally:
        _flop_counter = prev


def _flops(n) -> None:
    if _flop_counter is not None:
        _flop_counter.add(n)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Recorded tape of primitive ops, in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


_graph = Graph()


def graph() -> Graph:
    """The active tape."""
    return _graph


def clear_graph() -> None:
    """Drop all recorded nodes; call after each optimizer step."""
    _graph.clear()


@contextmanager
def scoped_graph():
    """Run with a fresh tape, restoring the previous one afterwards."""
    global _graph
    prev = _graph
    _graph = Graph()
    try:
        yield _graph
    finally:
        _graph = prev


# --------------------------------------------------------------------------
# tensor
# --------------------------------------------------------------------------

class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Tensors are immutable after creation except for the optimizer's in-place
    parameter update; intermediate results are produced, never modified.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Copy of the values (the tensor itself stays immutable)."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- gradient entry point -----------------------------------------------

    def backward(self) -> None:
        backward(self)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- pointwise / shape methods -------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs_(self)

    def sin(self):
        return sin(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def silu(self):
        return silu(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def full(shape, value, requires_grad=False) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# recording / backward machinery
# --------------------------------------------------------------------------

def record(op: str, inputs, out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap a primitive's result, recording a tape node when grads are live.

    `backward_fn(grad_out) -> tuple` must return one gradient array (or None)
    per input, aligned with `inputs`.
    """
    if _debug_nonfinite and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite output produced by op '{op}'")
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _graph.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires-grad leaf reachable from `loss`.

    Gradients accumulate additively, both across multiple uses inside the
    graph and across repeated `backward` calls; clear them between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    produced = False
    grads: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for node in reversed(_graph.nodes):
        if node.output is loss:
            produced = True
        entry = grads.pop(id(node.output), None)
        if entry is None:
            continue
        in_grads = node.backward(entry[1])
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            slot = grads.get(id(t))
            if slot is None:
                grads[id(t)] = [t, g.copy() if g is entry[1] else g]
            else:
                slot[1] = slot[1] + g
    if not produced:
        raise ValueError("loss was not produced on the active graph; "
                         "did you call backward under no_grad or after clear_graph?")
    # whatever remains was never produced by a node: the leaves
    for t, g in grads.values():
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast (trailing alignment)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise binary primitives (trailing-dimension broadcasting)
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data
    _flops(out.size)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    _flops(out.size)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    _flops(out.size)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return record("mul", (a, b), out, bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    _flops(out.size)

    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return record("div", (a, b), out, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    _flops(a.size)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def _fast_pow(x: np.ndarray, p: float) -> np.ndarray:
    # float powers are an order of magnitude slower than these special cases
    if p == 1.0:
        return x.copy()
    if p == 2.0:
        return x * x
    if p == 0.5:
        return np.sqrt(x)
    if p == -0.5:
        return 1.0 / np.sqrt(x)
    if p == -1.0:
        return 1.0 / x
    if p.is_integer():
        return np.power(x, int(p))
    return np.power(x, p)


def pow_scalar(a, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = _fast_pow(a.data, p)
    _flops(a.size)

    def bwd(g):
        return (g * (p * _fast_pow(a.data, p - 1.0)),)

    return record("pow", (a,), out, bwd)


# --------------------------------------------------------------------------
# pointwise unary primitives
# --------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    _flops(a.size)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    _flops(a.size)
    return record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    _flops(a.size)
    return record("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    _flops(a.size)
    # subgradient 0 at exactly 0
    return record("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    _flops(a.size)
    return record("sin", (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-safe in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    _flops(4 * a.size)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    _flops(a.size)
    # subgradient 0 at exactly 0
    return record("relu", (a,), np.maximum(a.data, 0.0),
                  lambda g: (g * (a.data > 0.0),))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    _flops(5 * a.size)

    def bwd(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return record("silu", (a,), a.data * s, bwd)


# --------------------------------------------------------------------------
# contraction / reduction / shape primitives
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """General matrix product `(..., m, k) @ (k, n)`; plain 2D x 2D included."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim != 2:
        raise ShapeError(f"matmul: need (..., m, k) @ (k, n), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: contraction dims disagree, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    k = a.shape[-1]
    _flops(2 * (a.size // k) * k * b.shape[1])

    def bwd(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return record("matmul", (a, b), out, bwd)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    _flops(a.size)
    kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bwd(g):
        return (np.broadcast_to(g.reshape(kshape), a.shape),)

    return record("sum", (a,), out, bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    _flops(a.size)
    kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bwd(g):
        return (np.broadcast_to(g.reshape(kshape), a.shape) / count,)

    return record("mean", (a,), out, bwd)


def reshape(a, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bwd(g):
        return (g.reshape(a.shape),)

    return record("reshape", (a,), out, bwd)


def transpose(a, *axes) -> Tensor:
    a = _as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return record("transpose", (a,), out, bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(i != axis and t.shape[i] != tensors[0].shape[i]
                               for i in range(nd)):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd(g):
        slicer = [slice(None)] * nd
        outs = []
        for i in range(len(tensors)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return record("concat", tuple(tensors), out, bwd)


# --------------------------------------------------------------------------
# spatial primitives
# --------------------------------------------------------------------------

def maxpool2x2(a) -> Tensor:
    """2x2 max pooling, stride 2. Gradient routes to the first maximal entry
    of each window in row-major order (deterministic tie-break)."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"maxpool2x2: need (B,C,H,W), got {a.shape}")
    b, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got H={h}, W={w}")
    win = (a.data.reshape(b, c, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(b, c, h // 2, w // 2, 4))
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    _flops(3 * a.size)

    def bwd(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(b, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(a.shape),)

    return record("maxpool2x2", (a,), out, bwd)


def _interp_indices(n_in: int, n_out: int):
    """Per-axis source indices and blend weights, half-pixel centers
    (align_corners=false convention)."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    w = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    return lo, hi, w


def _scatter_axis(grad, lo, hi, w, n_in, axis):
    """Transpose of 1D linear interpolation along `axis`."""
    g = np.moveaxis(grad, axis, 0)
    out = np.zeros((n_in,) + g.shape[1:], dtype=grad.dtype)
    wb = w.reshape((-1,) + (1,) * (g.ndim - 1))
    np.add.at(out, lo, g * (1.0 - wb))
    np.add.at(out, hi, g * wb)
    return np.moveaxis(out, 0, axis)


def upsample_bilinear2x(a) -> Tensor:
    """Double H and W by bilinear interpolation, half-pixel centers
    (align_corners=false)."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"upsample_bilinear2x: need (B,C,H,W), got {a.shape}")
    b, c, h, w = a.shape
    hlo, hhi, hw = _interp_indices(h, 2 * h)
    wlo, whi, ww = _interp_indices(w, 2 * w)
    hwc = hw.astype(a.dtype).reshape(-1, 1)
    wwc = ww.astype(a.dtype)
    rows = a.data[:, :, hlo, :] * (1.0 - hwc) + a.data[:, :, hhi, :] * hwc
    out = rows[:, :, :, wlo] * (1.0 - wwc) + rows[:, :, :, whi] * wwc
    _flops(6 * out.size)

    def bwd(g):
        grows = _scatter_axis(g, wlo, whi, ww, w, axis=3)
        return (_scatter_axis(grows, hlo, hhi, hw, h, axis=2),)

    return record("upsample_bilinear2x", (a,), out, bwd)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2D convolution (cross-correlation), NCHW layout.

    weight is (C_out, C_in/groups, kh, kw); groups == C_in == C_out gives the
    depthwise case. Implemented as kh*kw shifted GEMMs, so no im2col buffer is
    materialized.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need x (B,C,H,W) and weight (O,I,kh,kw), "
                         f"got {x.shape} and {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: groups={groups} must divide C_in={cin} and C_out={cout}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: weight expects {cin_g * groups} input channels, "
                         f"x has {cin} (groups={groups})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    h2 = (hp - kh) // stride + 1
    w2 = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    s = stride
    if groups == 1:
        acc = np.zeros((bsz, h2, w2, cout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i:i + s * h2:s, j:j + s * w2:s]
                acc += np.tensordot(xs, weight.data[:, :, i, j], axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    else:
        xg = xp.reshape(bsz, groups, cin_g, hp, wp)
        wg = weight.data.reshape(groups, cout // groups, cin_g, kh, kw)
        acc = np.zeros((bsz, groups, cout // groups, h2, w2), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xg[:, :, :, i:i + s * h2:s, j:j + s * w2:s]
                acc += np.einsum("bgihw,goi->bgohw", xs, wg[:, :, :, i, j],
                                 optimize=True)
        out = acc.reshape(bsz, cout, h2, w2)
    if bias is not None:
        out += bias.data[None, :, None, None]
    _flops(2 * bsz * h2 * w2 * cout * cin_g * kh * kw
           + (bsz * h2 * w2 * cout if bias is not None else 0))

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        if groups == 1:
            gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i:i + s * h2:s, j:j + s * w2:s]
                    gw[:, :, i, j] = np.tensordot(gt, xs, axes=([0, 1, 2], [0, 2, 3]))
                    gxs = np.tensordot(gt, weight.data[:, :, i, j], axes=([3], [0]))
                    gxp[:, :, i:i + s * h2:s, j:j + s * w2:s] += gxs.transpose(0, 3, 1, 2)
        else:
            gg = g.reshape(bsz, groups, cout // groups, h2, w2)
            wg = weight.data.reshape(groups, cout // groups, cin_g, kh, kw)
            gwg = gw.reshape(groups, cout // groups, cin_g, kh, kw)
            gxg = gxp.reshape(bsz, groups, cin_g, hp, wp)
            for i in range(kh):
                for j in range(kw):
                    xs = xg[:, :, :, i:i + s * h2:s, j:j + s * w2:s]
                    gwg[:, :, :, i, j] = np.einsum("bgohw,bgihw->goi", gg, xs,
                                                   optimize=True)
                    gxg[:, :, :, i:i + s * h2:s, j:j + s * w2:s] += np.einsum(
                        "bgohw,goi->bgihw", gg, wg[:, :, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if bias is not None:
            return gx, gw, gb
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, bwd)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-element comparison of analytic vs central-difference gradients.

    An element passes when |analytic - numeric| <= tol * max(1, |analytic|,
    |numeric|); `rel_err` stores that normalized error.
    """
    passed: bool
    max_rel_err: float
    rel_err: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return f"grad_check {state}: max rel err {self.max_rel_err:.3e}"


def grad_check(f, x: Tensor, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare f's analytic gradient at x against central finite differences.

    `f` must be a pure Tensor -> scalar Tensor function. Runs on a scoped
    tape, so the caller's graph is untouched. Note that parameters `f` closes
    over also accumulate gradient from the single analytic backward pass.
    """
    base = Tensor(x.data, requires_grad=True)
    with scoped_graph():
        loss = f(base)
        loss.backward()
    analytic = base.grad.copy()

    numeric = np.zeros_like(base.data)
    flat = base.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(Tensor(base.data)).item()
            flat[i] = orig - h
            down = f(Tensor(base.data)).item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(passed=bool(max_rel <= tol), max_rel_err=max_rel,
                           rel_err=rel, analytic=analytic, numeric=numeric)
