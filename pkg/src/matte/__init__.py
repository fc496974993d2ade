"""MATTE: routed multi-prompt conditioning and attribute inversion for diffusion models."""

__version__ = "0.1.0"

from .errors import (
    BackendError,
    ConfigError,
    EncoderError,
    EvalError,
    GridError,
    InversionError,
    MatteError,
)
from .router import (
    CellPrompt,
    ConditioningGrid,
    LayerPartition,
    StagePartition,
    TokenSchedule,
    build_grid,
    default_token_schedule,
    expand_prompt,
    grid_from_json,
    grid_to_json,
    locate,
    matte_layer_partition,
    matte_stage_partition,
    resolve,
    uniform_grid,
)
from .backends import (
    BackendDescriptor,
    DiffusionBackend,
    SamplerConfig,
    ToyBackend,
    backend_from_config,
)
from .palette import Palette, extract_palette, name_color, palette_phrase
from .inversion import (
    GroundTruth,
    InversionConfig,
    TokenSet,
    TrainingLog,
    baseline_invert,
    build_training_conditioning,
    compute_losses,
    invert,
    load_bundle,
    save_bundle,
)
from .probe import ProbeSpec, run_probe, summarize_attention
from .evaluation import (
    EvalReport,
    ablation_eval,
    cosine,
    nn_label,
    pair_disentanglement_eval,
    token_semantic_eval,
)

__all__ = [
    "__version__",
    "MatteError", "GridError", "ConfigError", "BackendError", "EncoderError",
    "InversionError", "EvalError",
    "CellPrompt", "ConditioningGrid", "LayerPartition", "StagePartition",
    "TokenSchedule", "build_grid", "default_token_schedule", "expand_prompt",
    "grid_from_json", "grid_to_json", "locate", "matte_layer_partition",
    "matte_stage_partition", "resolve", "uniform_grid",
    "BackendDescriptor", "DiffusionBackend", "SamplerConfig", "ToyBackend",
    "backend_from_config",
    "Palette", "extract_palette", "name_color", "palette_phrase",
    "GroundTruth", "InversionConfig", "TokenSet", "TrainingLog",
    "baseline_invert", "build_training_conditioning", "compute_losses",
    "invert", "load_bundle", "save_bundle",
    "ProbeSpec", "run_probe", "summarize_attention",
    "EvalReport", "ablation_eval", "cosine", "nn_label",
    "pair_disentanglement_eval", "token_semantic_eval",
]
