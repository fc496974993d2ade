"""Routing of text conditionings to (cross-attention layer, timestep) cells.

A denoiser with per-layer conditioning injection asks, for every layer index
and every timestep, which prompt it should receive. The answer is organized
as a grid over (layer subset, timestep stage) cells. Joint grids vary along
both axes; layer-only grids (16 slots, one per layer) and stage-only grids
(e.g. 10 decile slots) are the degenerate single-axis forms.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import GridError

N_LAYERS = 16
MAX_T = 1000

# Canonical per-layer spatial resolution labels, L1..L16: six encoder
# cross-attention layers, one mid block (res 8), nine decoder layers.
LAYER_RESOLUTIONS: tuple[int, ...] = (
    64, 64, 32, 32, 16, 16,   # encoder
    8,                        # mid
    16, 16, 16, 32, 32, 32, 64, 64, 64,  # decoder
)

FINE_DOWN = "fine-down"
MODERATE_DOWN = "moderate-down"
COARSE = "coarse"
MODERATE_UP = "moderate-up"
FINE_UP = "fine-up"

STAGE_IDS = ("t1", "t2", "t3", "t4")

# Learnable placeholder tokens. Unicode angle brackets are accepted in user
# input and normalized to the ASCII form.
TOKEN_COLOR = "<c>"
TOKEN_OBJECT = "<o>"
TOKEN_STYLE = "<s>"
TOKEN_LAYOUT = "<l>"
LEARNABLE_TOKENS = (TOKEN_COLOR, TOKEN_OBJECT, TOKEN_STYLE, TOKEN_LAYOUT)

_PLACEHOLDER_RE = re.compile(r"<[^<>\s]+>")


def normalize_prompt(text: str) -> str:
    """Map unicode angle brackets to ASCII and collapse whitespace."""
    text = text.replace("⟨", "<").replace("⟩", ">")
    text = text.replace("〈", "<").replace("〉", ">")
    return " ".join(text.split())


def placeholders_in(text: str) -> list[str]:
    """All placeholder tokens appearing in ``text``, in order."""
    return _PLACEHOLDER_RE.findall(normalize_prompt(text))


@dataclass(frozen=True)
class LayerPartition:
    """Ordered disjoint subsets of layer indices covering 1..n_layers."""

    subsets: tuple[tuple[str, frozenset[int]], ...]
    layer_resolution: Mapping[int, int] = field(default_factory=dict)
    n_layers: int = N_LAYERS

    def __post_init__(self):
        seen: set[int] = set()
        for subset_id, layers in self.subsets:
            if "." in subset_id:
                raise GridError(f"subset id {subset_id!r} must not contain '.'")
            if not layers:
                raise GridError(f"subset {subset_id!r} is empty")
            for idx in layers:
                if not 1 <= idx <= self.n_layers:
                    raise GridError(
                        f"layer index {idx} outside 1..{self.n_layers} in subset {subset_id!r}"
                    )
            overlap = seen & layers
            if overlap:
                raise GridError(
                    f"overlapping subsets: layers {sorted(overlap)} assigned twice"
                )
            seen |= layers
        missing = set(range(1, self.n_layers + 1)) - seen
        if missing:
            raise GridError(f"uncovered layers {sorted(missing)}")
        ids = [sid for sid, _ in self.subsets]
        if len(set(ids)) != len(ids):
            raise GridError("duplicate subset ids")
        if not self.layer_resolution:
            object.__setattr__(
                self,
                "layer_resolution",
                {i + 1: LAYER_RESOLUTIONS[i] for i in range(self.n_layers)},
            )
        for idx in range(1, self.n_layers + 1):
            if idx not in self.layer_resolution:
                raise GridError(f"layer {idx} has no resolution label")

    @property
    def subset_ids(self) -> tuple[str, ...]:
        return tuple(sid for sid, _ in self.subsets)

    def subset_of(self, layer_index: int) -> str:
        if not 1 <= layer_index <= self.n_layers:
            raise GridError(f"layer index {layer_index} outside 1..{self.n_layers}")
        for subset_id, layers in self.subsets:
            if layer_index in layers:
                return subset_id
        raise GridError(f"layer index {layer_index} not covered")  # unreachable

    def layers_of(self, subset_id: str) -> frozenset[int]:
        for sid, layers in self.subsets:
            if sid == subset_id:
                return layers
        raise GridError(f"unknown subset id {subset_id!r}")


@dataclass(frozen=True)
class StagePartition:
    """Ordered half-open timestep intervals covering [0, max_t)."""

    stages: tuple[tuple[str, tuple[int, int]], ...]
    max_t: int = MAX_T

    def __post_init__(self):
        ids = [sid for sid, _ in self.stages]
        if len(set(ids)) != len(ids):
            raise GridError("duplicate stage ids")
        for sid, (lo, hi) in self.stages:
            if "." in sid:
                raise GridError(f"stage id {sid!r} must not contain '.'")
            if not (0 <= lo < hi <= self.max_t):
                raise GridError(f"invalid stage interval [{lo},{hi})")
        spans = sorted(interval for _, interval in self.stages)
        cursor = 0
        for lo, hi in spans:
            if lo > cursor:
                raise GridError(f"timestep gap [{cursor},{lo})")
            if lo < cursor:
                raise GridError(f"timestep overlap at {lo}")
            cursor = hi
        if cursor != self.max_t:
            raise GridError(f"timestep gap [{cursor},{self.max_t})")

    @property
    def stage_ids(self) -> tuple[str, ...]:
        return tuple(sid for sid, _ in self.stages)

    def stage_of(self, t: float) -> str:
        if not 0 <= t < self.max_t:
            raise GridError(f"timestep {t} outside [0,{self.max_t})")
        for sid, (lo, hi) in self.stages:
            if lo <= t < hi:
                return sid
        raise GridError(f"timestep {t} not covered")  # unreachable

    def interval_of(self, stage_id: str) -> tuple[int, int]:
        for sid, interval in self.stages:
            if sid == stage_id:
                return interval
        raise GridError(f"unknown stage id {stage_id!r}")


def matte_layer_partition() -> LayerPartition:
    """Five layer subsets: fine/moderate encoder halves, coarse middle."""
    return LayerPartition(
        subsets=(
            (FINE_DOWN, frozenset({1, 2})),
            (MODERATE_DOWN, frozenset({3, 4, 5})),
            (COARSE, frozenset({6, 7, 8, 9})),
            (MODERATE_UP, frozenset({10, 11, 12, 13})),
            (FINE_UP, frozenset({14, 15, 16})),
        )
    )


def analysis_layer_partition() -> LayerPartition:
    """Three-way coarse/moderate/fine split used by the probe analyses."""
    return LayerPartition(
        subsets=(
            ("coarse", frozenset({6, 7, 8, 9})),
            ("moderate", frozenset({3, 4, 5, 10, 11, 12, 13})),
            ("fine", frozenset({1, 2, 14, 15, 16})),
        )
    )


def per_layer_partition(n_layers: int = N_LAYERS) -> LayerPartition:
    """One subset per layer (16-slot, layer-only routing)."""
    return LayerPartition(
        subsets=tuple((f"L{i}", frozenset({i})) for i in range(1, n_layers + 1)),
        n_layers=n_layers,
    )


def full_layer_partition(n_layers: int = N_LAYERS) -> LayerPartition:
    """A single subset holding every layer."""
    return LayerPartition(subsets=(("all", frozenset(range(1, n_layers + 1))),),
                          n_layers=n_layers)


def matte_stage_partition() -> StagePartition:
    """Four forward-diffusion stages: t1 high noise down to t4 low noise."""
    return StagePartition(
        stages=(
            ("t1", (800, 1000)),
            ("t2", (600, 800)),
            ("t3", (200, 600)),
            ("t4", (0, 200)),
        )
    )


def decile_stage_partition(n_stages: int = 10) -> StagePartition:
    """Equal stages ordered along the denoising direction (d1 = highest t)."""
    if MAX_T % n_stages:
        raise GridError(f"{n_stages} stages do not divide [0,{MAX_T}) evenly")
    width = MAX_T // n_stages
    stages = tuple(
        (f"d{j}", (MAX_T - width * j, MAX_T - width * (j - 1)))
        for j in range(1, n_stages + 1)
    )
    return StagePartition(stages=stages)


def full_stage_partition() -> StagePartition:
    """A single stage spanning all timesteps."""
    return StagePartition(stages=(("all", (0, MAX_T)),))


@dataclass(frozen=True)
class CellPrompt:
    """Prompt assigned to one grid cell: text, a precomputed sequence, or both."""

    text: str | None = None
    embedded: object = None  # optional precomputed conditioning sequence

    def __post_init__(self):
        if self.text is None and self.embedded is None:
            raise GridError("cell prompt needs text or an embedded conditioning")
        if self.text is not None:
            normalized = normalize_prompt(self.text)
            object.__setattr__(self, "text", normalized)
            tokens = placeholders_in(normalized)
            dupes = {tok for tok in tokens if tokens.count(tok) > 1}
            if dupes:
                raise GridError(
                    f"placeholder tokens repeated in cell prompt: {sorted(dupes)}"
                )

    def tokens(self) -> tuple[str, ...]:
        return tuple(placeholders_in(self.text)) if self.text else ()


MODES = ("joint", "layer_only", "stage_only", "uniform")


@dataclass(frozen=True)
class ConditioningGrid:
    """Immutable map from (layer subset, timestep stage) to a prompt."""

    mode: str
    layer_partition: LayerPartition
    stage_partition: StagePartition
    cells: Mapping[tuple[str, str], CellPrompt]

    def __post_init__(self):
        if self.mode not in MODES:
            raise GridError(f"unknown grid mode {self.mode!r}")
        if self.mode in ("layer_only", "uniform") and len(self.stage_partition.stages) != 1:
            raise GridError(f"{self.mode} grid must have a single stage")
        if self.mode in ("stage_only", "uniform") and len(self.layer_partition.subsets) != 1:
            raise GridError(f"{self.mode} grid must have a single layer subset")
        expected = {
            (sid, tid)
            for sid in self.layer_partition.subset_ids
            for tid in self.stage_partition.stage_ids
        }
        keys = set(self.cells.keys())
        missing = expected - keys
        if missing:
            raise GridError(f"missing cell {sorted(missing)[0]}")
        extra = keys - expected
        if extra:
            raise GridError(f"unknown cell key {sorted(extra)[0]}")
        object.__setattr__(self, "cells", dict(self.cells))

    def locate(self, layer_index: int, t: float) -> tuple[str, str]:
        """The unique (subset, stage) cell key owning (layer_index, t)."""
        return (
            self.layer_partition.subset_of(layer_index),
            self.stage_partition.stage_of(t),
        )

    def resolve(self, layer_index: int, t: float) -> CellPrompt:
        """The prompt layer ``layer_index`` receives at timestep ``t``."""
        return self.cells[self.locate(layer_index, t)]

    @property
    def n_layers(self) -> int:
        return self.layer_partition.n_layers

    def prompts(self) -> dict[tuple[str, str], str | None]:
        return {key: cell.text for key, cell in sorted(self.cells.items())}


def build_grid(
    mode: str,
    layer_partition: LayerPartition,
    stage_partition: StagePartition,
    cell_prompts: Mapping[tuple[str, str], CellPrompt | str],
) -> ConditioningGrid:
    """Validate and assemble a conditioning grid.

    ``cell_prompts`` maps (subset_id, stage_id) to a CellPrompt or a bare
    prompt string. Every cell implied by the partitions must be present.
    """
    cells = {
        key: prompt if isinstance(prompt, CellPrompt) else CellPrompt(text=prompt)
        for key, prompt in cell_prompts.items()
    }
    return ConditioningGrid(
        mode=mode,
        layer_partition=layer_partition,
        stage_partition=stage_partition,
        cells=cells,
    )


def uniform_grid(prompt: CellPrompt | str) -> ConditioningGrid:
    """A grid delivering the same prompt to every layer at every timestep."""
    return build_grid(
        "uniform",
        full_layer_partition(),
        full_stage_partition(),
        {("all", "all"): prompt},
    )


def locate(grid: ConditioningGrid, layer_index: int, t: float) -> tuple[str, str]:
    return grid.locate(layer_index, t)


def resolve(grid: ConditioningGrid, layer_index: int, t: float) -> CellPrompt:
    return grid.resolve(layer_index, t)


def _delete_tokens(prompt: str, drop: Iterable[str]) -> str:
    out = prompt
    for token in drop:
        out = out.replace(token, " ")
    return " ".join(out.split())


def expand_prompt(
    user_prompt: str,
    token_schedule: "TokenSchedule",
    policy: str = "active_cells_only",
) -> ConditioningGrid:
    """Expand a generation prompt into a joint grid under a token schedule.

    ``active_cells_only`` deletes each placeholder from every cell where the
    schedule marks it inactive (whitespace renormalized, no grammar repair);
    ``everywhere`` copies the full prompt into all cells.
    """
    if policy not in ("active_cells_only", "everywhere"):
        raise GridError(f"unknown expansion policy {policy!r}")
    prompt = normalize_prompt(user_prompt)
    tokens = placeholders_in(prompt)
    unknown = [tok for tok in tokens if tok not in token_schedule.entries]
    if unknown:
        raise GridError(f"unknown placeholder token {unknown[0]!r}")
    cells: dict[tuple[str, str], CellPrompt] = {}
    for subset_id in token_schedule.layer_partition.subset_ids:
        for stage_id in token_schedule.stage_partition.stage_ids:
            if policy == "everywhere":
                cells[(subset_id, stage_id)] = CellPrompt(text=prompt)
                continue
            inactive = [
                tok for tok in tokens
                if not token_schedule.is_active(tok, subset_id, stage_id)
            ]
            cells[(subset_id, stage_id)] = CellPrompt(
                text=_delete_tokens(prompt, inactive)
            )
    return build_grid(
        "joint",
        token_schedule.layer_partition,
        token_schedule.stage_partition,
        cells,
    )


@dataclass(frozen=True)
class TokenSchedule:
    """Which (layer subsets, stages) each learnable token conditions."""

    layer_partition: LayerPartition
    stage_partition: StagePartition
    entries: Mapping[str, tuple[frozenset[str], frozenset[str]]]

    def __post_init__(self):
        subset_ids = set(self.layer_partition.subset_ids)
        stage_ids = set(self.stage_partition.stage_ids)
        for token, (subsets, stages) in self.entries.items():
            if not _PLACEHOLDER_RE.fullmatch(token):
                raise GridError(f"schedule token {token!r} is not a placeholder")
            bad_subset = set(subsets) - subset_ids
            if bad_subset:
                raise GridError(
                    f"schedule for {token} references unknown subset {sorted(bad_subset)[0]!r}"
                )
            bad_stage = set(stages) - stage_ids
            if bad_stage:
                raise GridError(
                    f"schedule for {token} references unknown stage {sorted(bad_stage)[0]!r}"
                )
        object.__setattr__(self, "entries", dict(self.entries))

    def is_active(self, token: str, subset_id: str, stage_id: str) -> bool:
        subsets, stages = self.entries[token]
        return subset_id in subsets and stage_id in stages

    def tokens_for_cell(self, subset_id: str, stage_id: str) -> tuple[str, ...]:
        """Active tokens of a cell, in canonical token order."""
        return tuple(
            tok for tok in self.entries
            if self.is_active(tok, subset_id, stage_id)
        )

    def stages_of(self, token: str) -> frozenset[str]:
        return self.entries[token][1]

    def subsets_of(self, token: str) -> frozenset[str]:
        return self.entries[token][0]


def default_token_schedule() -> TokenSchedule:
    """Default activity map: c,s on moderate@t1..t2; o on coarse@t2..t3; l on coarse@t1."""
    moderate = frozenset({MODERATE_DOWN, MODERATE_UP})
    coarse = frozenset({COARSE})
    return TokenSchedule(
        layer_partition=matte_layer_partition(),
        stage_partition=matte_stage_partition(),
        entries={
            TOKEN_COLOR: (moderate, frozenset({"t1", "t2"})),
            TOKEN_OBJECT: (coarse, frozenset({"t2", "t3"})),
            TOKEN_STYLE: (moderate, frozenset({"t1", "t2"})),
            TOKEN_LAYOUT: (coarse, frozenset({"t1"})),
        },
    )


# ---------------------------------------------------------------------------
# JSON config round-trip

def grid_to_config(grid: ConditioningGrid) -> dict:
    """Serializable dict form of a grid. Embedded-only cells cannot serialize."""
    subsets = [sorted(layers) for _, layers in grid.layer_partition.subsets]
    stages = [list(interval) for _, interval in grid.stage_partition.stages]
    cells = {}
    for (subset_id, stage_id), cell in grid.cells.items():
        if cell.text is None:
            raise GridError(
                f"cell {subset_id}.{stage_id} has no text; embedded conditionings "
                "do not serialize to grid configs"
            )
        cells[f"{subset_id}.{stage_id}"] = cell.text
    return {
        "mode": grid.mode,
        "subsets": subsets,
        "subset_ids": list(grid.layer_partition.subset_ids),
        "stages": stages,
        "stage_ids": list(grid.stage_partition.stage_ids),
        "cells": dict(sorted(cells.items())),
    }


def grid_from_config(config: Mapping) -> ConditioningGrid:
    """Build a grid from its dict form (ids optional, default s1../t1..)."""
    try:
        mode = config["mode"]
        raw_subsets = config["subsets"]
        raw_stages = config["stages"]
        raw_cells = config["cells"]
    except (KeyError, TypeError) as exc:
        raise GridError(f"grid config missing field: {exc}") from exc
    subset_ids = list(config.get("subset_ids") or
                      (f"s{i+1}" for i in range(len(raw_subsets))))
    stage_ids = list(config.get("stage_ids") or
                     (f"t{i+1}" for i in range(len(raw_stages))))
    if len(subset_ids) != len(raw_subsets):
        raise GridError("subset_ids length does not match subsets")
    if len(stage_ids) != len(raw_stages):
        raise GridError("stage_ids length does not match stages")
    layer_partition = LayerPartition(
        subsets=tuple(
            (sid, frozenset(int(i) for i in layers))
            for sid, layers in zip(subset_ids, raw_subsets)
        )
    )
    stage_partition = StagePartition(
        stages=tuple(
            (tid, (int(lo), int(hi)))
            for tid, (lo, hi) in zip(stage_ids, raw_stages)
        )
    )
    cells: dict[tuple[str, str], CellPrompt] = {}
    for key, text in raw_cells.items():
        subset_id, dot, stage_id = key.partition(".")
        if not dot:
            raise GridError(f"cell key {key!r} is not 'subset.stage'")
        cells[(subset_id, stage_id)] = CellPrompt(text=text)
    return build_grid(mode, layer_partition, stage_partition, cells)


def grid_to_json(grid: ConditioningGrid) -> str:
    return json.dumps(grid_to_config(grid), indent=2, sort_keys=True)


def grid_from_json(text: str) -> ConditioningGrid:
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GridError(f"grid config is not valid JSON: {exc}") from exc
    return grid_from_config(config)
