"""Backend contract: text encoding, latent codec, noise prediction, sampling.

A backend wraps a latent diffusion stack whose denoiser accepts one
conditioning sequence per cross-attention layer. The reverse-process loop
lives here so every backend honors the same routing and determinism
contract; concrete backends supply the encoders and the denoiser.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from ..attention import AttentionMapStack
from ..errors import BackendError, GridError
from ..router import ConditioningGrid, CellPrompt
from ..schedule import NoiseSchedule, ScheduleParams

InjectionHook = Callable[[int, int, torch.Tensor], None]


@dataclass(frozen=True)
class BackendDescriptor:
    """Static facts a caller needs to route conditionings into a backend."""

    n_cross_attention_layers: int
    layer_resolutions: tuple[int, ...]
    embedding_dim: int
    max_timestep: int = 1000
    schedule: ScheduleParams = field(default_factory=ScheduleParams)

    def __post_init__(self):
        if self.n_cross_attention_layers < 1:
            raise BackendError("backend needs at least one cross-attention layer")
        if len(self.layer_resolutions) != self.n_cross_attention_layers:
            raise BackendError(
                "layer_resolutions length must equal the cross-attention layer count"
            )


@dataclass(frozen=True)
class LatentState:
    """A latent together with the timestep it sits at."""

    z: torch.Tensor
    t: int
    max_timestep: int = 1000

    def __post_init__(self):
        if not (0 <= self.t < self.max_timestep):
            raise BackendError(f"timestep {self.t} outside [0,{self.max_timestep})")
        if not torch.isfinite(self.z).all():
            raise BackendError("latent contains non-finite values")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0
    capture_attention: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise BackendError("steps must be >= 1")


@dataclass
class SampleOutput:
    image: np.ndarray
    final_latent: torch.Tensor
    attention: AttentionMapStack | None = None


class DiffusionBackend(ABC):
    """Pluggable diffusion stack with per-layer conditioning injection."""

    descriptor: BackendDescriptor
    schedule: NoiseSchedule

    # -- text side ---------------------------------------------------------
    @abstractmethod
    def tokenize(self, prompt: str) -> list[str]:
        """Token strings for a prompt, including begin/end markers."""

    @abstractmethod
    def encode_text(self, prompt: str) -> torch.Tensor:
        """(sequence_length, embedding_dim) conditioning for a prompt."""

    @abstractmethod
    def token_embedding(self, word: str) -> torch.Tensor:
        """Mean input embedding of a word or phrase's constituent tokens."""

    @abstractmethod
    def register_token(self, name: str, vector: torch.Tensor | None = None,
                       learnable: bool = False) -> torch.Tensor:
        """Install a placeholder token; returns its (possibly learnable) slot."""

    # -- latent side -------------------------------------------------------
    @abstractmethod
    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        """Image -> latent z0."""

    @abstractmethod
    def decode_latent(self, z: torch.Tensor) -> np.ndarray:
        """Latent -> image as float array in [0, 1]."""

    @abstractmethod
    def initial_latent(self, seed: int) -> torch.Tensor:
        """Seeded unit-Gaussian latent; the only stochastic draw in sampling."""

    # -- denoiser ----------------------------------------------------------
    @abstractmethod
    def predict_noise(self, z_t: torch.Tensor, t: int,
                      conditionings: list[torch.Tensor]) -> torch.Tensor:
        """Noise estimate given one conditioning per cross-attention layer."""

    def predict_noise_with_attention(
        self, z_t: torch.Tensor, t: int, conditionings: list[torch.Tensor]
    ) -> tuple[torch.Tensor, list[np.ndarray]]:
        """Like predict_noise, also returning per-layer (L, r, r) attention."""
        raise BackendError(f"{type(self).__name__} does not capture attention")

    # -- shared machinery ----------------------------------------------------
    def q_sample(self, z0: torch.Tensor, t: int, noise: torch.Tensor) -> torch.Tensor:
        return self.schedule.q_sample(z0, t, noise)

    def _check_grid(self, grid: ConditioningGrid) -> None:
        if grid.n_layers != self.descriptor.n_cross_attention_layers:
            raise GridError(
                f"grid routes {grid.n_layers} layers but backend has "
                f"{self.descriptor.n_cross_attention_layers}"
            )

    def _cell_conditioning(self, cell: CellPrompt,
                           cache: dict) -> tuple[torch.Tensor, list[str]]:
        key = id(cell)
        if key not in cache:
            if cell.embedded is not None:
                cond = torch.as_tensor(cell.embedded)
                tokens = [f"~{i}" for i in range(cond.shape[0])]
            else:
                cond = self.encode_text(cell.text)
                tokens = self.tokenize(cell.text)
            cache[key] = (cond, tokens)
        return cache[key]

    def conditionings_for(self, grid: ConditioningGrid, t: int,
                          cache: dict | None = None,
                          injection_hook: InjectionHook | None = None,
                          ) -> tuple[list[torch.Tensor], list[list[str]]]:
        """Per-layer conditionings for timestep ``t``, resolved through ``grid``.

        Training and sampling both route conditioning through here, so an
        injection hook observes exactly what each layer receives.
        """
        self._check_grid(grid)
        if cache is None:
            cache = {}
        conds = []
        token_lists = []
        for layer in range(1, self.descriptor.n_cross_attention_layers + 1):
            cond, tokens = self._cell_conditioning(grid.resolve(layer, t), cache)
            if injection_hook is not None:
                injection_hook(layer, t, cond)
            conds.append(cond)
            token_lists.append(tokens)
        return conds, token_lists

    def sample(self, grid: ConditioningGrid, config: SamplerConfig,
               injection_hook: InjectionHook | None = None) -> SampleOutput:
        """Reverse process with per-(layer, timestep) routed conditioning.

        Deterministic given (weights, config.seed): the DDIM update is
        noise-free, so the initial latent is the only stochastic draw.
        Attention capture keeps the conditional pass of each step.
        """
        self._check_grid(grid)
        timesteps = self.schedule.sampling_timesteps(config.steps)
        n_layers = self.descriptor.n_cross_attention_layers
        z = self.initial_latent(config.seed)
        use_cfg = config.guidance_scale != 1.0
        uncond = self.encode_text("") if use_cfg else None
        stack = AttentionMapStack(metadata={"seed": config.seed}) \
            if config.capture_attention else None
        cache: dict = {}
        abar = self.schedule.alphas_cumprod
        with torch.no_grad():
            for step_idx, t in enumerate(timesteps):
                conds, token_lists = self.conditionings_for(
                    grid, t, cache, injection_hook)
                if stack is not None:
                    eps_c, layer_maps = self.predict_noise_with_attention(z, t, conds)
                    _record_token_maps(stack, t, layer_maps, token_lists)
                else:
                    eps_c = self.predict_noise(z, t, conds)
                if use_cfg:
                    eps_u = self.predict_noise(z, t, [uncond] * n_layers)
                    eps = eps_u + config.guidance_scale * (eps_c - eps_u)
                else:
                    eps = eps_c
                abar_t = abar[t].to(z.dtype)
                t_prev = timesteps[step_idx + 1] if step_idx + 1 < len(timesteps) else None
                abar_prev = abar[t_prev].to(z.dtype) if t_prev is not None \
                    else torch.tensor(1.0, dtype=z.dtype)
                x0 = (z - torch.sqrt(1.0 - abar_t) * eps) / torch.sqrt(abar_t)
                z = torch.sqrt(abar_prev) * x0 + torch.sqrt(1.0 - abar_prev) * eps
        image = self.decode_latent(z)
        return SampleOutput(image=image, final_latent=z, attention=stack)


def _record_token_maps(stack: AttentionMapStack, t: int,
                       layer_maps: list[np.ndarray],
                       token_lists: list[list[str]]) -> None:
    # Repeated words (and multi-token words upstream) aggregate by max:
    # a word is salient wherever any of its pieces attends. Framing markers
    # carry '|' (reserved by the stack's key format) and are skipped.
    for layer_idx, (maps, tokens) in enumerate(zip(layer_maps, token_lists), start=1):
        per_token: dict[str, np.ndarray] = {}
        for pos, token in enumerate(tokens):
            if "|" in token:
                continue
            m = maps[pos]
            if token in per_token:
                per_token[token] = np.maximum(per_token[token], m)
            else:
                per_token[token] = m
        for token, m in per_token.items():
            stack.add(layer_idx, t, token, m)
