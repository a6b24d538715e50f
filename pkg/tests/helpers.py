"""Shared test utilities: parameter-path gradient checks and the independent
recursive spline/KAN oracles."""
import numpy as np

from ukan.module import resolve_parameter
from ukan.tensor import Tensor, grad_check


def cox_de_boor(x: float, k: int, i: int, t: np.ndarray) -> float:
    """Textbook recursive B-spline basis, the independent oracle."""
    if k == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    left = 0.0
    if t[i + k] != t[i]:
        left = (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(x, k - 1, i, t)
    right = 0.0
    if t[i + k + 1] != t[i + 1]:
        right = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(
            x, k - 1, i + 1, t)
    return left + right


def oracle_bases(x: float, spec) -> np.ndarray:
    t = spec.knots()
    return np.array([cox_de_boor(x, spec.order, i, t) for i in range(spec.n_bases)])


def brute_force_kan(layer, x: np.ndarray) -> np.ndarray:
    """Edge-by-edge double loop over (q, p), the KAN layer oracle."""
    spec = layer.spec
    coeffs = layer.spline_coeffs.data
    wb = layer.base_weight.data
    ws = layer.spline_scale.data
    batch = x.shape[0]
    out = np.zeros((batch, layer.n_out))
    for b in range(batch):
        for q in range(layer.n_out):
            acc = 0.0
            for p in range(layer.n_in):
                v = x[b, p]
                s = v / (1.0 + np.exp(-v))
                bas = oracle_bases(v, spec)
                acc += wb[q, p] * s + ws[q, p] * float(coeffs[q, p] @ bas)
            out[b, q] = acc
    return out


def grad_check_param(model, name, run, h=1e-5, tol=1e-4):
    """Finite-difference check of d(run(model))/d(parameter `name`).

    `run(model)` must be a pure scalar-Tensor function of the model. The named
    parameter is swapped for the probe tensor during each evaluation, so the
    analytic gradient lands on the probe.
    """
    owner, attr = resolve_parameter(model, name)
    orig = getattr(owner, attr)

    def f(t):
        setattr(owner, attr, t)
        try:
            return run(model)
        finally:
            setattr(owner, attr, orig)

    return grad_check(f, Tensor(orig.data.copy()), h=h, tol=tol)
