"""Autodiff core: shape algebra, backward rules vs finite differences,
tape/graph mechanics, and determinism."""
import numpy as np
import pytest

from ukan import tensor as T
from ukan.tensor import (
    Tensor, ShapeError, conv2d, concat, grad_check, maxpool2x2,
    upsample_bilinear2x,
)


class TestForwardShapes:
    def test_matmul_shape_algebra(self, rng):
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(3, 4)))
        assert (a @ b).shape == (2, 4)

    def test_add_ones(self):
        out = Tensor(np.ones((2, 2))) + Tensor(np.ones((2, 2)))
        assert np.array_equal(out.data, np.full((2, 2), 2.0))

    def test_matmul_identity_exact(self, rng):
        a = Tensor(rng.normal(size=(3, 5)))
        out = Tensor(np.eye(3)) @ a
        assert np.array_equal(out.data, a.data)

    def test_matmul_mismatch_names_op_and_dims(self, rng):
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(4, 5)))
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
            a @ b

    def test_broadcast_trailing_alignment(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        y = Tensor(rng.normal(size=(3, 4)))
        assert (x + y).shape == (2, 3, 4)
        z = Tensor(rng.normal(size=(2, 1, 4)))
        assert (x * z).shape == (2, 3, 4)

    def test_broadcast_mismatch_raises(self, rng):
        x = Tensor(rng.normal(size=(2, 3)))
        y = Tensor(rng.normal(size=(2, 4)))
        with pytest.raises(ShapeError, match="add"):
            x + y

    def test_reshape_size_mismatch(self, rng):
        with pytest.raises(ShapeError, match="reshape"):
            Tensor(rng.normal(size=(2, 3))).reshape(4, 2)

    def test_concat_off_axis_mismatch(self, rng):
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(3, 4)))
        with pytest.raises(ShapeError, match="concat"):
            concat([a, b], axis=0)


class TestBackwardBasics:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (x * x).sum().backward()
        assert np.allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-12)

    def test_product_rule(self, rng):
        x = Tensor(rng.normal(size=(4,)), requires_grad=True)
        y = Tensor(rng.normal(size=(4,)), requires_grad=True)
        (x * y).sum().backward()
        assert np.allclose(x.grad, y.data, atol=1e-12)
        assert np.allclose(y.grad, x.data, atol=1e-12)

    def test_grads_accumulate_across_uses(self):
        x = Tensor([3.0], requires_grad=True)
        loss = (x * x).sum() + (2.0 * x).sum()
        loss.backward()
        assert np.allclose(x.grad, [8.0], atol=1e-12)

    def test_grads_accumulate_across_calls(self):
        x = Tensor([1.0, -1.0], requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        assert np.allclose(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * x).backward()

    def test_off_graph_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        loss = (x * x).sum()
        T.clear_graph()
        with pytest.raises(ValueError, match="graph"):
            loss.backward()

    def test_no_grad_suppresses_recording(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with T.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert len(T.graph()) == 0

    def test_requires_grad_propagates(self, rng):
        a = Tensor(rng.normal(size=(2,)))
        b = Tensor(rng.normal(size=(2,)), requires_grad=True)
        assert not (a + a).requires_grad
        assert (a + b).requires_grad

    def test_linearity_of_backward(self, rng):
        x0 = rng.normal(size=(5,))

        def grad_of(fn):
            x = Tensor(x0, requires_grad=True)
            with T.scoped_graph():
                fn(x).backward()
            return x.grad

        gf = grad_of(lambda x: x.sin().sum())
        gg = grad_of(lambda x: (x * x).sum())
        gmix = grad_of(lambda x: 2.5 * x.sin().sum() + (-1.25) * (x * x).sum())
        assert np.max(np.abs(gmix - (2.5 * gf - 1.25 * gg))) <= 1e-12


def _const(rng, *shape):
    # constants are hoisted so each probed function stays pure
    return Tensor(rng.normal(size=shape))


# one entry per primitive with a smooth (or locally smooth) backward rule:
# builder(rng) -> (pure f: Tensor -> scalar Tensor, probe shape)
GRAD_CASES = {
    "add": lambda rng, c=None: ((lambda x, c=_const(rng, 3, 4): (x + c).sum()), (3, 4)),
    "add_broadcast": lambda rng: (
        (lambda x, c=_const(rng, 2, 3, 4): (c + x).sum()), (3, 4)),
    "sub": lambda rng: ((lambda x, c=_const(rng, 3, 4): (c - x).sum()), (3, 4)),
    "mul_broadcast": lambda rng: (
        (lambda x, c=_const(rng, 2, 1, 4): (x * c).sum()), (1, 3, 4)),
    "div": lambda rng: (
        (lambda x, c=_const(rng, 3, 4): (c / (x * x + 1.0)).sum()), (3, 4)),
    "neg": lambda rng: ((lambda x: (-x).sum()), (5,)),
    "pow": lambda rng: ((lambda x: ((x * x + 0.5) ** 1.5).sum()), (4,)),
    "exp": lambda rng: ((lambda x: x.exp().sum()), (4,)),
    "log": lambda rng: ((lambda x: (x * x + 0.5).log().sum()), (4,)),
    "sqrt": lambda rng: ((lambda x: (x * x + 0.5).sqrt().sum()), (4,)),
    "abs": lambda rng: ((lambda x: (x + 3.0).abs().sum()), (4,)),  # away from 0
    "sin": lambda rng: ((lambda x: x.sin().sum()), (6,)),
    "sigmoid": lambda rng: ((lambda x: x.sigmoid().sum()), (5,)),
    "silu": lambda rng: ((lambda x: x.silu().sum()), (5,)),
    "relu": lambda rng: ((lambda x: (x + 2.0).relu().sum()), (5,)),  # off the kink
    "matmul_lhs": lambda rng: (
        (lambda x, c=_const(rng, 4, 2): (x @ c).sum()), (3, 4)),
    "matmul_rhs": lambda rng: (
        (lambda x, c=_const(rng, 2, 3, 4): (c @ x).sum()), (4, 2)),
    "sum_axis": lambda rng: (
        (lambda x, c=_const(rng, 2, 4): (x.sum(axis=1) * c).sum()), (2, 3, 4)),
    "mean_keepdims": lambda rng: (
        (lambda x: (x.mean(axis=(0, 2), keepdims=True) * 3.0).sum()), (2, 3, 4)),
    "reshape": lambda rng: (
        (lambda x, c=_const(rng, 2, 3): (x.reshape(6, 2) @ c).sum()), (3, 4)),
    "transpose": lambda rng: (
        (lambda x, c=_const(rng, 3, 2, 4): (x.transpose(1, 0, 2) * c).sum()),
        (2, 3, 4)),
    "concat": lambda rng: (
        (lambda x, c=_const(rng, 2, 6): (concat([x, x * 2.0], axis=1) * c).sum()),
        (2, 3)),
    "conv2d_x": lambda rng: (
        (lambda x, w=_const(rng, 4, 3, 3, 3):
         conv2d(x, w, stride=1, padding=1).sum()), (2, 3, 5, 5)),
    "conv2d_w": lambda rng: (
        (lambda w, x=_const(rng, 2, 3, 6, 6), c=_const(rng, 2, 4, 3, 3):
         (conv2d(x, w, stride=2, padding=1) * c).sum()), (4, 3, 3, 3)),
    "conv2d_bias": lambda rng: (
        (lambda b, x=_const(rng, 1, 2, 4, 4), w=_const(rng, 3, 2, 3, 3):
         (conv2d(x, w, b, padding=1) ** 2.0).sum()), (3,)),
    "depthwise_x": lambda rng: (
        (lambda x, w=_const(rng, 3, 1, 3, 3):
         (conv2d(x, w, stride=1, padding=1, groups=3) ** 2.0).sum()), (2, 3, 4, 4)),
    "grouped_w": lambda rng: (
        (lambda w, x=_const(rng, 2, 4, 4, 4):
         conv2d(x, w, stride=1, padding=1, groups=2).sum()), (6, 2, 3, 3)),
    "maxpool": lambda rng: (
        (lambda x, c=_const(rng, 1, 2, 2, 2): (maxpool2x2(x) * c).sum()),
        (1, 2, 4, 4)),
    "upsample": lambda rng: (
        (lambda x, c=_const(rng, 1, 2, 6, 8): (upsample_bilinear2x(x) * c).sum()),
        (1, 2, 3, 4)),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_gradients_vs_finite_differences(name, rng):
    f, shape = GRAD_CASES[name](rng)
    x = Tensor(rng.normal(size=shape))
    report = grad_check(f, x, h=1e-5, tol=1e-4)
    assert report.passed, f"{name}: {report}"


class TestGradCheckHarness:
    def test_sin_passes(self, rng):
        x = Tensor(rng.normal(size=(6,)))
        assert grad_check(lambda t: t.sin().sum(), x).passed

    def test_wrong_backward_rule_fails(self, rng):
        # sum(x * stop_grad(x)) has true derivative 2x but analytic grad x
        x = Tensor(rng.normal(size=(4,)) + 1.0)
        report = grad_check(lambda t: (t * t.detach()).sum(), x)
        assert not report.passed

    def test_relu_away_from_kink(self, rng):
        x = Tensor(rng.uniform(1.0, 2.0, size=(8,)) * np.sign(rng.normal(size=(8,))))
        assert grad_check(lambda t: t.relu().sum(), x).passed

    def test_report_carries_per_element_errors(self, rng):
        x = Tensor(rng.normal(size=(3,)))
        report = grad_check(lambda t: (t * t).sum(), x)
        assert report.rel_err.shape == (3,)
        assert report.max_rel_err == report.rel_err.max()


class TestSpatialOps:
    def test_maxpool_single_window(self):
        out = maxpool2x2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.data.reshape(()) == 4.0

    def test_maxpool_tie_routes_to_first_rowmajor(self):
        x = Tensor(np.array([[[[5.0, 5.0], [5.0, 5.0]]]]), requires_grad=True)
        maxpool2x2(x).sum().backward()
        assert np.array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_maxpool_odd_dims_rejected(self, rng):
        with pytest.raises(ShapeError, match="even"):
            maxpool2x2(Tensor(rng.normal(size=(1, 1, 3, 4))))

    def test_upsample_constant_preserved(self):
        x = Tensor(np.full((1, 2, 3, 3), 7.5))
        out = upsample_bilinear2x(x)
        assert out.shape == (1, 2, 6, 6)
        assert np.allclose(out.data, 7.5, atol=1e-15)

    def test_upsample_matches_closed_form_weights(self, rng):
        # half-pixel centers, scale 2: output column j draws from source
        # floor((j+0.5)/2-0.5) and its neighbour with weight frac(...)
        x = rng.normal(size=(1, 1, 2, 2))
        out = upsample_bilinear2x(Tensor(x)).data[0, 0]
        src = [(j + 0.5) / 2 - 0.5 for j in range(4)]
        i0 = [int(np.floor(s)) for s in src]
        lo = np.clip(i0, 0, 1)
        hi = np.clip(np.array(i0) + 1, 0, 1)
        w = np.array(src) - np.array(i0)
        rows = x[0, 0][lo, :] * (1 - w)[:, None] + x[0, 0][hi, :] * w[:, None]
        expect = rows[:, lo] * (1 - w) + rows[:, hi] * w
        assert np.max(np.abs(out - expect)) <= 1e-12

    def test_pool_of_upsample_preserves_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 6)))
        assert maxpool2x2(upsample_bilinear2x(x)).shape == (1, 3, 4, 6)

    def test_conv_identity_1x1(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        assert np.array_equal(conv2d(x, w).data, x.data)

    def test_conv_all_ones_counts_overlap(self):
        x = Tensor(np.ones((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, stride=1, padding=1).data[0, 0]
        assert out[2, 2] == 9.0
        assert out[0, 0] == 4.0
        assert out[0, 2] == 6.0

    def test_conv_matches_naive_six_loops(self, rng):
        x = rng.normal(size=(2, 3, 6, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=(4,))
        stride, pad = 2, 1
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                     padding=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        h2 = (6 + 2 * pad - 3) // stride + 1
        w2 = (7 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, h2, w2))
        for n in range(2):
            for o in range(4):
                for y in range(h2):
                    for z in range(w2):
                        acc = b[o]
                        for c in range(3):
                            for i in range(3):
                                for j in range(3):
                                    acc += xp[n, c, y * stride + i,
                                              z * stride + j] * w[o, c, i, j]
                        ref[n, o, y, z] = acc
        assert np.max(np.abs(out - ref)) <= 1e-10

    def test_depthwise_matches_per_channel_loop(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(3, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=1, padding=1, groups=3).data
        for c in range(3):
            ref = conv2d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1]),
                         stride=1, padding=1).data
            assert np.max(np.abs(out[:, c:c + 1] - ref)) <= 1e-10

    def test_depthwise_zeroed_kernel_zeroes_channel(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        w = np.ones((3, 1, 3, 3))
        w[1] = 0.0
        out = conv2d(x, Tensor(w), stride=1, padding=1, groups=3).data
        assert np.all(out[:, 1] == 0.0)
        assert np.any(out[:, 0] != 0.0)

    def test_conv_group_mismatch_raises(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        w = Tensor(rng.normal(size=(6, 2, 3, 3)))
        with pytest.raises(ShapeError, match="groups"):
            conv2d(x, w, groups=3)

    def test_conv_linearity_without_bias(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        y = rng.normal(size=(1, 2, 5, 5))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        lhs = conv2d(Tensor(2.0 * x + 0.5 * y), w, padding=1).data
        rhs = (2.0 * conv2d(Tensor(x), w, padding=1).data
               + 0.5 * conv2d(Tensor(y), w, padding=1).data)
        assert np.max(np.abs(lhs - rhs)) <= 1e-10


class TestActivationValues:
    def test_relu_values(self):
        x = Tensor([-1.0, 2.0])
        assert np.array_equal(x.relu().data, [0.0, 2.0])

    def test_silu_zero(self):
        assert Tensor([0.0]).silu().data[0] == 0.0

    def test_silu_gradient_tight(self, rng):
        x = Tensor(rng.normal(size=(8,)))
        report = grad_check(lambda t: t.silu().sum(), x, h=1e-5, tol=1e-6)
        assert report.passed


class TestRuntimeModes:
    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            with T.scoped_graph():
                loss = ((x @ w).silu() * x).sum()
                loss.backward()
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_debug_mode_traps_nonfinite(self):
        T.set_debug_nonfinite(True)
        x = Tensor([1.0, 0.0])
        with np.errstate(divide="ignore", invalid="ignore"):
            with pytest.raises(FloatingPointError, match="div"):
                x / Tensor([1.0, 0.0])  # trap fires on the non-finite result

    def test_float32_mode(self, rng):
        T.set_default_dtype("float32")
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        assert x.dtype == np.float32
        (x * x).sum().backward()
        assert x.grad.dtype == np.float32

    def test_tape_cleared(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        (x * x).sum()
        assert len(T.graph()) > 0
        T.clear_graph()
        assert len(T.graph()) == 0

    def test_flop_counter_matmul(self, rng):
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(3, 4)))
        with T.count_flops() as c:
            a @ b
        assert c.total == 2 * 2 * 3 * 4


class TestGraphInvariants:
    def test_tape_is_topologically_ordered(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        y = Tensor(rng.normal(size=(3,)), requires_grad=True)
        ((x * y).silu() + x.sin()).sum()
        produced = set()
        for node in T.graph().nodes:
            for inp in node.inputs:
                if inp.requires_grad:
                    # every grad-bearing input is a leaf or an earlier output
                    assert inp is x or inp is y or id(inp) in produced
            produced.add(id(node.output))

    def test_backward_visits_each_node_once(self, rng):
        # diamond: z is consumed twice, its node must still run exactly once
        x = Tensor(rng.normal(size=(4,)), requires_grad=True)
        z = x * 3.0
        loss = (z + z).sum()
        z_node = next(n for n in T.graph().nodes if n.output is z)
        calls = []
        original = z_node.backward
        z_node.backward = lambda g: (calls.append(g.copy()), original(g))[1]
        loss.backward()
        assert len(calls) == 1
        assert np.allclose(calls[0], 2.0)  # both uses accumulated before visit
        assert np.allclose(x.grad, 6.0)
