from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal/noise coefficients indexed by integer timestep.

    ``alphas_cumprod[t]`` follows the training schedule of the checkpoint
    family, except that index 0 is pinned to exactly 1 so that t=0 is the
    clean latent (the reference used by the shift metric).
    """

    alphas_cumprod: np.ndarray

    @classmethod
    def scaled_linear(
        cls, num_train_timesteps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012
    ) -> "NoiseSchedule":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, num_train_timesteps, dtype=np.float64) ** 2
        acp = np.cumprod(1.0 - betas)
        acp[0] = 1.0
        return cls(alphas_cumprod=acp)

    @property
    def max_timestep(self) -> int:
        return len(self.alphas_cumprod) - 1

    def check(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.max_timestep:
            raise ValidationError(f"timestep {t} outside [0, {self.max_timestep}]")
        return t

    def signal(self, t: int) -> float:
        return float(np.sqrt(self.alphas_cumprod[self.check(t)]))

    def noise(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alphas_cumprod[self.check(t)]))

    def add_noise(self, x0: torch.Tensor, t: int, seed: int) -> torch.Tensor:
        t = self.check(t)
        if t == 0:
            return x0.clone()
        gen = torch.Generator().manual_seed(int(seed))
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float32).to(x0.dtype)
        return self.signal(t) * x0 + self.noise(t) * eps

    def ddim_step(self, x_t: torch.Tensor, eps: torch.Tensor, t: int, t_next: int) -> torch.Tensor:
        """Deterministic (eta=0) DDIM update from ``t`` to ``t_next`` < ``t``."""
        a_t, a_n = self.alphas_cumprod[self.check(t)], self.alphas_cumprod[self.check(t_next)]
        x0_pred = (x_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        return float(np.sqrt(a_n)) * x0_pred + float(np.sqrt(1.0 - a_n)) * eps


def window_timesteps(start: int, stop: int, steps: int) -> list[int]:
    """``steps + 1`` descending integer timesteps from ``start`` to ``stop``."""
    if start <= stop:
        raise ValidationError(f"window start {start} must exceed stop {stop}")
    ts = np.linspace(start, stop, steps + 1).round().astype(int)
    out: list[int] = []
    for t in ts.tolist():
        if not out or t < out[-1]:
            out.append(t)
    return out
