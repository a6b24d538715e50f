"""Adam with bias correction and the cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np


class OptimizerError(RuntimeError):
    """Raised when a step cannot proceed (e.g. non-finite gradients)."""


class Adam:
    """Standard Adam over named parameters; updates tensors in place.

    Parameters with no accumulated gradient are skipped (their moments stay
    untouched); a non-finite gradient aborts the whole step with a diagnostic
    naming the parameter.
    """

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        if lr <= 0.0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(named_params)
        seen = set()
        for name, _ in self.params:
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise OptimizerError(
                    f"non-finite gradient in {name!r} at step {self.t + 1}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_arrays(self) -> dict:
        """Moment buffers as named arrays for checkpointing."""
        state = {f"adam.m.{name}": arr for name, arr in self.m.items()}
        state.update({f"adam.v.{name}": arr for name, arr in self.v.items()})
        return state

    def load_state_arrays(self, state: dict, t: int) -> None:
        for name, _ in self.params:
            self.m[name] = np.array(state[f"adam.m.{name}"])
            self.v[name] = np.array(state[f"adam.v.{name}"])
        self.t = int(t)


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing: lr_max at epoch 0 down to lr_min at epoch == total."""
    if total_epochs <= 0:
        return lr_min
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))
