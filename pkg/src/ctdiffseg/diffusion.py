"""Forward diffusion process: linear beta schedule, noising, and the MSE loss."""

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """Linear-beta DDPM schedule with cumulative signal levels."""

    T: int
    betas: np.ndarray        # (T,)
    alpha_bars: np.ndarray   # (T,) cumulative products of (1 - beta)

    def signal_noise(self, t):
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) for scalar or array t."""
        ab = self.alpha_bars[np.asarray(t)]
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Noised sample sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps.

    Works for numpy arrays and torch tensors; `t` may be a scalar step or a
    per-sample vector matching the leading batch dimension.
    """
    if x0.shape != eps.shape:
        raise ScheduleError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    a, s = schedule.signal_noise(t)
    if np.ndim(a) > 0:
        extra = x0.ndim - 1
        a = a.reshape((-1,) + (1,) * extra)
        s = s.reshape((-1,) + (1,) * extra)
        if hasattr(x0, "device"):  # torch tensor
            import torch
            a = torch.as_tensor(a, dtype=x0.dtype, device=x0.device)
            s = torch.as_tensor(s, dtype=x0.dtype, device=x0.device)
    else:
        a, s = float(a), float(s)
    return a * x0 + s * eps


def diffusion_loss(eps_pred, eps):
    """Mean squared error over all elements of the noise prediction."""
    if eps_pred.shape != eps.shape:
        raise ScheduleError(f"shape mismatch: {eps_pred.shape} vs {eps.shape}")
    diff = eps_pred - eps
    return (diff * diff).mean()
