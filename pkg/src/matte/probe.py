"""Attribute probing: routed multi-prompt sampling plus attention analysis.

A probe samples one image under an arbitrary conditioning grid while
recording where tracked words attend, then aggregates the raw maps into a
per-(layer, stage) panel: a mean map at a common resolution and a scalar
saliency per cell.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionMapStack, resize_mass_preserving
from .backends.base import DiffusionBackend, SamplerConfig
from .errors import EvalError
from .router import (
    ConditioningGrid,
    StagePartition,
    grid_to_json,
    matte_stage_partition,
    normalize_prompt,
)


@dataclass(frozen=True)
class ProbeSpec:
    """What to sample and which words to watch."""

    grid: ConditioningGrid
    tracked_tokens: tuple[str, ...]
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig())

    def __post_init__(self):
        if not self.tracked_tokens:
            raise EvalError("probe needs at least one tracked token")
        cell_words = []
        for cell in self.grid.cells.values():
            if cell.text:
                cell_words.append(set(cell.text.lower().split()))
        for word in self.tracked_tokens:
            pieces = set(normalize_prompt(word).lower().split())
            if not pieces:
                raise EvalError("tracked token must be non-empty")
            if not any(pieces <= words for words in cell_words):
                raise EvalError(
                    f"tracked token {word!r} appears in no cell prompt"
                )


def _marker_tokens(backend: DiffusionBackend) -> set[str]:
    return set(backend.tokenize(""))


def _word_pieces(backend: DiffusionBackend, word: str) -> list[str]:
    markers = _marker_tokens(backend)
    return [tok for tok in backend.tokenize(word) if tok not in markers]


def run_probe(spec: ProbeSpec, backend: DiffusionBackend,
              ) -> tuple[np.ndarray, AttentionMapStack]:
    """Sample under the probe grid, keeping tracked words' attention maps.

    Multi-piece tracked words aggregate by elementwise max over their
    pieces' maps: the word is salient wherever any piece attends.
    """
    sampler = SamplerConfig(
        steps=spec.sampler.steps,
        guidance_scale=spec.sampler.guidance_scale,
        seed=spec.sampler.seed,
        capture_attention=True,
    )
    out = backend.sample(spec.grid, sampler)
    raw = out.attention
    grid_hash = hashlib.sha256(grid_to_json(spec.grid).encode()).hexdigest()
    tracked = AttentionMapStack(metadata={
        "grid_hash": grid_hash,
        "seed": sampler.seed,
        "tracked": ",".join(spec.tracked_tokens),
    })
    for word in spec.tracked_tokens:
        pieces = _word_pieces(backend, word)
        found = False
        for (layer, t, tok), arr in raw.entries():
            if tok not in pieces:
                continue
            key = (layer, t, word)
            if key in tracked.maps:
                tracked.maps[key] = np.maximum(tracked.maps[key], arr)
            else:
                tracked.add(layer, t, word, arr)
            found = True
        if not found:
            raise EvalError(
                f"tracked token {word!r} produced no attention maps"
            )
    return out.image, tracked


@dataclass(frozen=True)
class CellSummary:
    mean_map: np.ndarray
    saliency: float
    n_maps: int


@dataclass(frozen=True)
class ProbeSummary:
    token: str
    resolution: int
    stage_ids: tuple[str, ...]
    cells: dict[tuple[int, str], CellSummary]


def summarize_attention(stack: AttentionMapStack, token: str,
                        stage_partition: StagePartition | None = None,
                        ) -> ProbeSummary:
    """Aggregate a token's maps into one mean map and saliency per (layer, stage).

    The mean map is computed at a common resolution (the largest native
    resolution present) with mass-preserving resizing; the saliency is the
    mean activation over the cell's raw maps.
    """
    if stage_partition is None:
        stage_partition = matte_stage_partition()
    entries = list(stack.entries(token))
    if not entries:
        raise EvalError(f"token {token!r} is not tracked in this stack")
    resolution = max(arr.shape[0] for _, arr in entries)

    grouped: dict[tuple[int, str], list[np.ndarray]] = {}
    for (layer, t, _), arr in entries:
        stage = stage_partition.stage_of(t)
        grouped.setdefault((layer, stage), []).append(arr)

    cells = {}
    for key, maps in grouped.items():
        resized = [resize_mass_preserving(m.astype(np.float64), resolution)
                   for m in maps]
        mean_map = np.mean(resized, axis=0)
        saliency = float(np.mean([m.mean() for m in maps]))
        cells[key] = CellSummary(mean_map=mean_map, saliency=saliency,
                                 n_maps=len(maps))
    return ProbeSummary(token=token, resolution=resolution,
                        stage_ids=stage_partition.stage_ids, cells=cells)


def _hot_ramp(values: np.ndarray) -> np.ndarray:
    """Monochrome-to-hot ramp: black through red and orange to white."""
    x = np.clip(values, 0.0, 1.0)
    r = np.clip(3.0 * x, 0.0, 1.0)
    g = np.clip(3.0 * x - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * x - 2.0, 0.0, 1.0)
    rgb = np.stack([r, g, b], axis=-1)
    return np.rint(rgb * 255.0).astype(np.uint8)


def render_heatmaps(summary: ProbeSummary, out_dir, scale: int = 16) -> list[Path]:
    """One PNG per (layer, stage) panel, max-normalized per panel."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for (layer, stage), cell in sorted(summary.cells.items()):
        panel = cell.mean_map
        peak = panel.max()
        normed = panel / peak if peak > 0 else panel
        rgb = _hot_ramp(np.kron(normed, np.ones((scale, scale))))
        path = out_dir / f"L{layer:02d}_{stage}_{summary.token.strip('<>')}.png"
        Image.fromarray(rgb, mode="RGB").save(path)
        paths.append(path)
    return paths


def write_saliency_csv(summary: ProbeSummary, path) -> None:
    stage_order = {sid: i for i, sid in enumerate(summary.stage_ids)}
    lines = ["layer,stage,saliency,n_maps"]
    for (layer, stage), cell in sorted(
            summary.cells.items(),
            key=lambda item: (item[0][0], stage_order[item[0][1]])):
        lines.append(f"{layer},{stage},{cell.saliency!r},{cell.n_maps}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
