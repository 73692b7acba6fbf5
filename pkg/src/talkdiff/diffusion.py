"""Shape-generic denoising diffusion with clean-sample (x0) prediction.

Forward process::

    z_t = sqrt(a_t) z_0 + sqrt(1 - a_t) eps,    a_t = prod_{i<=t} (1 - beta_i)

Reverse (DDIM) update from t to t_prev given a prediction of z_0::

    z_prev = sqrt(a_prev) z0_hat
             + sqrt(1 - a_prev - sigma_t^2) / sqrt(1 - a_t) * (z_t - sqrt(a_t) z0_hat)
             + sigma_t eps

Timesteps run 1..T; ``t = 0`` is the clean endpoint with ``a_0 = 1``.
The functions here accept numpy arrays or torch tensors interchangeably.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta schedule; ``alphas_cum[t-1]`` holds the cumulative product at step ``t``."""

    T: int
    betas: np.ndarray
    alphas_cum: np.ndarray
    eta: float = 0.0

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self.check_t(t)
        return float(self.alphas_cum[t - 1])

    def check_t(self, t: int) -> None:
        if not (1 <= int(t) <= self.T):
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def sigma(self, t: int, t_prev: int) -> float:
        """DDIM noise scale; zero when ``eta == 0`` or ``t_prev == 0``."""
        a_t, a_prev = self.alpha_bar(t), self.alpha_bar(t_prev)
        if self.eta == 0.0 or t_prev == 0:
            return 0.0
        return self.eta * math.sqrt((1.0 - a_prev) / (1.0 - a_t)) * math.sqrt(1.0 - a_t / a_prev)

    def timesteps(self, n_steps: int) -> list[int]:
        """Decreasing sub-sequence of ``n_steps`` timesteps with uniform stride ``T / n_steps``."""
        if not (1 <= n_steps <= self.T):
            raise ValueError(f"n_steps must be in [1, {self.T}], got {n_steps}")
        stride = self.T / n_steps
        steps = [int(round(self.T - i * stride)) for i in range(n_steps)]
        if len(set(steps)) != n_steps or steps[-1] < 1:
            raise ValueError(f"cannot build {n_steps} distinct timesteps from T={self.T}")
        return steps


def make_linear_schedule(T: int = 1000, beta_start: float = 0.0015, beta_end: float = 0.0195, eta: float = 0.0) -> DiffusionSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("betas must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas_cum = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alphas_cum.setflags(write=False)
    return DiffusionSchedule(T=int(T), betas=betas, alphas_cum=alphas_cum, eta=float(eta))


def _check_same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(z0, t: int, eps, schedule: DiffusionSchedule):
    _check_same_shape(z0, eps, "forward_noise")
    schedule.check_t(t)
    a_t = schedule.alpha_bar(t)
    return math.sqrt(a_t) * z0 + math.sqrt(1.0 - a_t) * eps


def forward_noise_batch(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Per-item timesteps ``t`` (shape ``[B]``, values in ``[1, T]``) over a batched ``z0``."""
    _check_same_shape(z0, eps, "forward_noise_batch")
    if t.min() < 1 or t.max() > schedule.T:
        raise ValueError("timestep out of range")
    a = torch.tensor(schedule.alphas_cum, dtype=torch.float64)[t.long() - 1].to(z0.dtype)
    a = a.reshape(-1, *([1] * (z0.dim() - 1)))
    return a.sqrt() * z0 + (1.0 - a).sqrt() * eps


def x0_loss(pred_z0, true_z0):
    _check_same_shape(pred_z0, true_z0, "x0_loss")
    diff = pred_z0 - true_z0
    return (diff * diff).mean()


def ddim_step(z_t, pred_z0, t: int, t_prev: int, schedule: DiffusionSchedule, eps=None, sigma: float | None = None):
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    if t_prev < 0:
        raise ValueError("t_prev must be >= 0")
    _check_same_shape(z_t, pred_z0, "ddim_step")
    a_t, a_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    if sigma is None:
        sigma = schedule.sigma(t, t_prev)
    var = 1.0 - a_prev - sigma * sigma
    if var < -1e-12:
        raise ValueError(f"invalid variance: sigma^2={sigma * sigma:.3g} exceeds 1 - a_prev={1.0 - a_prev:.3g}")
    coef = math.sqrt(max(var, 0.0)) / math.sqrt(1.0 - a_t)
    out = math.sqrt(a_prev) * pred_z0 + coef * (z_t - math.sqrt(a_t) * pred_z0)
    if sigma > 0.0:
        if eps is None:
            raise ValueError("eps is required when sigma > 0")
        _check_same_shape(z_t, eps, "ddim_step eps")
        out = out + sigma * eps
    return out


Denoiser = Callable[[torch.Tensor, int, object], torch.Tensor]


def sample(
    denoiser: Denoiser,
    shape,
    schedule: DiffusionSchedule,
    n_steps: int,
    seed: int,
    context=None,
    dtype: torch.dtype = torch.float64,
) -> tuple[torch.Tensor, int]:
    """Run DDIM from seeded Gaussian noise; returns ``(z0_hat, number_of_denoiser_calls)``."""
    gen = torch.Generator().manual_seed(int(seed))
    shape = tuple(int(s) for s in shape)
    z = torch.randn(shape, generator=gen, dtype=dtype)
    steps = schedule.timesteps(n_steps)
    calls = 0
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        pred = denoiser(z, t, context)
        calls += 1
        if not isinstance(pred, torch.Tensor) or tuple(pred.shape) != shape:
            got = tuple(pred.shape) if hasattr(pred, "shape") else type(pred).__name__
            raise RuntimeError(f"denoiser returned {got} at t={t}; expected shape {shape}")
        sig = schedule.sigma(t, t_prev)
        noise = torch.randn(shape, generator=gen, dtype=dtype) if sig > 0 else None
        z = ddim_step(z, pred.to(dtype), t, t_prev, schedule, noise)
    return z, calls
