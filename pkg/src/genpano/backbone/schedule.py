"""Noise schedule, forward noising and the DDPM reverse step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ShapeMismatch, TimestepOutOfRange


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients for steps ``t = 1..T``.

    ``alphas_cumprod[t - 1]`` is the cumulative product at step ``t`` and
    ``timesteps[t - 1]`` the timestep value fed to the denoiser (differs from
    ``t`` for strided inference schedules).
    """

    alphas_cumprod: np.ndarray
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alphas_cumprod)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return cls(np.cumprod(1.0 - betas), np.arange(1, T + 1))

    def strided(self, steps: int) -> "NoiseSchedule":
        """Subsample to ``steps`` entries, keeping the first and last step."""
        if steps >= self.T:
            return self
        idx = np.unique(np.round(np.linspace(0, self.T - 1, steps)).astype(np.int64))
        return NoiseSchedule(self.alphas_cumprod[idx], self.timesteps[idx])

    def alpha_bar(self, t: int) -> float:
        check_t(t, self.T)
        return float(self.alphas_cumprod[t - 1])

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else self.alpha_bar(t - 1)

    def to_dict(self) -> dict:
        return {"alphas_cumprod": [float(a) for a in self.alphas_cumprod],
                "timesteps": [int(t) for t in self.timesteps]}


def check_t(t, T):
    tt = np.asarray(t)
    if tt.size and (tt.min() < 1 or tt.max() > T):
        raise TimestepOutOfRange(f"timestep outside [1, {T}]: {t}")


def _coef(values, t, like: torch.Tensor):
    t = torch.as_tensor(t)
    a = torch.as_tensor(values, dtype=torch.float64)[t.long() - 1]
    if a.ndim == 1:
        a = a.view(-1, *([1] * (like.ndim - 1)))
    return a.to(like.dtype)


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward-process sample ``sqrt(a_t) z0 + sqrt(1 - a_t) eps`` (``t`` scalar or per batch)."""
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    check_t(t if not torch.is_tensor(t) else t.cpu().numpy(), schedule.T)
    a = _coef(schedule.alphas_cumprod, t, z0)
    return a.sqrt() * z0 + (1 - a).sqrt() * eps


def predict_x0(z_t: torch.Tensor, t: int, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    a = schedule.alpha_bar(t)
    return (z_t - np.sqrt(1 - a) * eps_hat) / np.sqrt(a)


def ddpm_step(z_t: torch.Tensor, t: int, eps_hat: torch.Tensor, schedule: NoiseSchedule,
              generator: torch.Generator | None = None, clamp=None,
              variance_scale: float = 1.0) -> torch.Tensor:
    """One ancestral DDPM step from ``t`` to ``t - 1`` on a (possibly strided) schedule.

    ``clamp`` optionally projects the clean-latent estimate (e.g. onto the codec's
    valid range). No noise is added at ``t = 1``.
    """
    if eps_hat.shape != z_t.shape:
        raise ShapeMismatch(f"eps_hat {tuple(eps_hat.shape)} vs z_t {tuple(z_t.shape)}")
    a_t = schedule.alpha_bar(t)
    a_prev = schedule.alpha_bar_prev(t)
    alpha = a_t / a_prev
    beta = 1.0 - alpha
    x0 = predict_x0(z_t, t, eps_hat, schedule)
    if clamp is not None:
        x0 = clamp(x0)
    mean = (np.sqrt(a_prev) * beta / (1 - a_t)) * x0 + (np.sqrt(alpha) * (1 - a_prev) / (1 - a_t)) * z_t
    if t == 1 or variance_scale == 0:
        return mean
    var = beta * (1 - a_prev) / (1 - a_t)
    noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return mean + variance_scale * np.sqrt(var) * noise
