"""Diffusion backend implementations and the registry that selects them."""

from .base import (
    BackendDescriptor,
    DiffusionBackend,
    LatentState,
    SamplerConfig,
    SampleOutput,
)
from .registry import backend_from_config
from .toy import ToyBackend

__all__ = [
    "BackendDescriptor",
    "DiffusionBackend",
    "LatentState",
    "SamplerConfig",
    "SampleOutput",
    "backend_from_config",
    "ToyBackend",
]
