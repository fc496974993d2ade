"""DDPM forward-noise schedule and q-sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import BackendError


@dataclass(frozen=True)
class ScheduleParams:
    """Linear-beta schedule description, serializable into backend configs."""

    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    n_steps: int = 1000

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "n_steps": self.n_steps,
        }


class NoiseSchedule:
    """Precomputed beta / cumulative-alpha tables in float64."""

    def __init__(self, params: ScheduleParams = ScheduleParams()):
        if params.kind != "linear":
            raise BackendError(f"unsupported schedule kind {params.kind!r}")
        if params.n_steps < 1:
            raise BackendError("schedule needs at least one step")
        self.params = params
        betas = np.linspace(
            params.beta_start, params.beta_end, params.n_steps, dtype=np.float64
        )
        alphas = 1.0 - betas
        self.betas = torch.from_numpy(betas)
        self.alphas_cumprod = torch.from_numpy(np.cumprod(alphas))

    @property
    def n_steps(self) -> int:
        return self.params.n_steps

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas_cumprod[t])

    def _check_t(self, t: int) -> None:
        if not 0 <= int(t) < self.n_steps:
            raise BackendError(f"timestep {t} outside [0,{self.n_steps})")

    def q_sample(self, z0: torch.Tensor, t: int, noise: torch.Tensor) -> torch.Tensor:
        """Forward diffusion: z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) noise."""
        self._check_t(t)
        if noise.shape != z0.shape:
            raise BackendError(
                f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}"
            )
        abar = self.alphas_cumprod[int(t)].to(z0.dtype)
        return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * noise

    def sampling_timesteps(self, steps: int) -> list[int]:
        """Descending, deduplicated timestep trajectory for ``steps`` steps."""
        if steps < 1:
            raise BackendError("steps must be >= 1")
        if steps > self.n_steps:
            raise BackendError(
                f"step count {steps} exceeds max timestep {self.n_steps}"
            )
        ts = np.linspace(self.n_steps - 1, 0, steps)
        ts = np.unique(np.round(ts).astype(int))[::-1]
        return [int(t) for t in ts]
