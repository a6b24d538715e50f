"""DDPM forward corruption, noise-prediction training objective, and the
ancestral sampler.

Timesteps are 1-based: t runs over [1, T]. Internally the per-step constants
live in 0-indexed arrays, so beta(t) == betas[t-1]. Images are scaled to
[-1, 1] for all diffusion work.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import mse
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep variance constants: betas, alphas = 1 - betas, and the
    running products alpha_bars."""
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("betas must be a non-empty 1D array")
        if not (np.all(b > 0.0) and np.all(b < 1.0)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(b) < 0.0):
            raise ValueError("betas must be non-decreasing")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")

    def _index(self, t):
        ti = np.asarray(t, dtype=np.int64)
        if np.any(ti < 1) or np.any(ti > self.T):
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return ti - 1

    def beta(self, t):
        return self.betas[self._index(t)]

    def alpha(self, t):
        return self.alphas[self._index(t)]

    def alpha_bar(self, t):
        return self.alpha_bars[self._index(t)]


def linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> NoiseSchedule:
    """Reference linear beta ramp."""
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas,
                         alpha_bars=np.cumprod(alphas))


def q_sample(x0: np.ndarray, t, eps: np.ndarray,
             schedule: NoiseSchedule) -> np.ndarray:
    """Corrupt clean images: x_t = sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps.

    `t` is a scalar or a per-image array of shape (B,); x0 in [-1, 1].
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    abar = schedule.alpha_bar(t)
    if np.ndim(abar):
        if len(abar) != x0.shape[0]:
            raise ValueError(f"{len(abar)} timesteps for batch {x0.shape[0]}")
        abar = abar.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def diffusion_loss(model, x0: np.ndarray, schedule: NoiseSchedule,
                   rng: np.random.Generator) -> Tensor:
    """Noise-prediction MSE on a batch: t ~ Uniform{1..T} per image,
    eps ~ N(0,1), loss = mean((eps - model(x_t, t))^2)."""
    x0 = np.asarray(x0)
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, schedule)
    pred = model(Tensor(x_t), t)
    return mse(pred, Tensor(eps))


def ddpm_sample(model, schedule: NoiseSchedule, n: int, image_shape: tuple,
                seed: int, batch_size: int = 256) -> np.ndarray:
    """Ancestral sampling of n images, clipped to [-1, 1].

    x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) * eps_theta(x_t, t)) / sqrt(alpha_t)
              + sqrt(beta_t) * z,   z ~ N(0,1) except z = 0 at t = 1.

    Deterministic for fixed (seed, n, batch_size); chains are chunked to bound
    memory.
    """
    rng = np.random.default_rng(seed)
    was_training = model.training
    model.eval()
    chunks = []
    try:
        with no_grad():
            for start in range(0, n, batch_size):
                b = min(batch_size, n - start)
                x = rng.standard_normal((b,) + tuple(image_shape))
                for t in range(schedule.T, 0, -1):
                    eps_hat = model(Tensor(x), np.full(b, t)).data
                    coef = schedule.beta(t) / np.sqrt(1.0 - schedule.alpha_bar(t))
                    x = (x - coef * eps_hat) / np.sqrt(schedule.alpha(t))
                    if t > 1:
                        x = x + np.sqrt(schedule.beta(t)) * rng.standard_normal(x.shape)
                chunks.append(np.clip(x, -1.0, 1.0))
    finally:
        model.train(was_training)
    return np.concatenate(chunks, axis=0)
