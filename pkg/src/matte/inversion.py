"""Single-image attribute inversion with routed conditioning.

Learns four placeholder tokens <c>, <o>, <s>, <l> from one reference image by
optimizing, per sampled timestep, only the tokens whose schedule marks them
active, under

    L_inv = L_R + lambda_cs * L_CS + lambda_o * L_O

where L_R is the denoiser's reconstruction MSE, L_CS keeps the color token as
far from a randomly drawn training style as the ground-truth colors are, and
L_O anchors the object token to its class word. Layer-only (16 vectors) and
stage-only (10 vectors) baselines train under the same loop with L_R alone.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .errors import InversionError
from .palette import extract_palette, palette_phrase
from .router import (
    CellPrompt,
    ConditioningGrid,
    StagePartition,
    TokenSchedule,
    build_grid,
    decile_stage_partition,
    default_token_schedule,
    full_layer_partition,
    full_stage_partition,
    per_layer_partition,
    placeholders_in,
    TOKEN_COLOR,
    TOKEN_LAYOUT,
    TOKEN_OBJECT,
    TOKEN_STYLE,
)
from .vocab import STYLES_TRAIN

MATTE_TOKENS = (TOKEN_COLOR, TOKEN_OBJECT, TOKEN_STYLE, TOKEN_LAYOUT)

# Square brackets mark segments that survive only when every placeholder
# inside them is active for the cell being assembled.
DEFAULT_SCAFFOLD = "a[ <c> colored] photo[ of <o>][ in <s> style][ in <l> layout]"
BASELINE_SCAFFOLD = "a photo of {token}"

_SEGMENT_RE = re.compile(r"\[([^\[\]]*)\]")

BUNDLE_FORMAT = "matte-tokens/1"

BASELINE_MODES = ("layer_only_16", "stage_only_10")


# ---------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class TokenSet:
    """The four learnable attribute vectors plus their activity schedule."""

    c: torch.Tensor
    o: torch.Tensor
    s: torch.Tensor
    l: torch.Tensor
    schedule: TokenSchedule

    def __post_init__(self):
        dims = set()
        for name in ("c", "o", "s", "l"):
            vec = getattr(self, name)
            if vec.ndim != 1:
                raise InversionError(f"token {name} must be a vector")
            if not torch.isfinite(vec).all():
                raise InversionError(f"token {name} contains non-finite values")
            dims.add(vec.shape[0])
        if len(dims) != 1:
            raise InversionError(f"token dimensions disagree: {sorted(dims)}")

    def vector(self, token: str) -> torch.Tensor:
        return {TOKEN_COLOR: self.c, TOKEN_OBJECT: self.o,
                TOKEN_STYLE: self.s, TOKEN_LAYOUT: self.l}[token]


@dataclass(frozen=True)
class GroundTruth:
    """Anchor vectors the regularizers pull toward."""

    c_gt: torch.Tensor
    o_gt: torch.Tensor
    class_label: str
    style_pool: tuple[str, ...]
    palette_phrase: str = ""

    def __post_init__(self):
        if self.c_gt.shape != self.o_gt.shape:
            raise InversionError(
                f"anchor dimensions disagree: {tuple(self.c_gt.shape)} vs "
                f"{tuple(self.o_gt.shape)}"
            )
        if not self.style_pool:
            raise InversionError("style pool must be non-empty")


@dataclass(frozen=True)
class InversionConfig:
    lr: float = 5e-3
    steps: int = 500
    batch: int = 1
    lambda_cs: float = 0.1
    lambda_o: float = 0.1
    cs_variant: str = "absolute"
    seed: int = 0
    token_init: str = "class_word"

    def __post_init__(self):
        if self.lambda_cs < 0 or self.lambda_o < 0:
            raise InversionError("loss weights must be >= 0")
        # steps=0 is allowed so an untrained baseline returns its initialization.
        if self.steps < 0:
            raise InversionError("steps must be >= 0")
        if self.batch < 1:
            raise InversionError("batch must be >= 1")
        if self.cs_variant not in ("literal", "absolute"):
            raise InversionError(f"unknown cs_variant {self.cs_variant!r}")
        if self.token_init not in ("class_word", "random"):
            raise InversionError(f"unknown token_init {self.token_init!r}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StepRecord:
    step: int
    t: tuple[int, ...]
    l_r: float
    l_cs: float
    l_o: float
    l_inv: float
    active: tuple[str, ...]


@dataclass
class TrainingLog:
    records: list[StepRecord] = field(default_factory=list)

    def add(self, record: StepRecord) -> None:
        if record.l_r < 0 or record.l_o < 0:
            raise InversionError("reconstruction and object losses must be >= 0")
        if record.step != len(self.records):
            raise InversionError(
                f"log expects step {len(self.records)}, got {record.step}"
            )
        self.records.append(record)

    def series(self, name: str) -> list[float]:
        return [getattr(rec, name) for rec in self.records]


# ---------------------------------------------------------------------------
# Scaffold assembly

def assemble_scaffold(template: str, active: set[str]) -> str:
    """Drop every bracketed segment whose placeholders are not all active."""

    def keep(match: re.Match) -> str:
        segment = match.group(1)
        tokens = placeholders_in(segment)
        if tokens and all(tok in active for tok in tokens):
            return segment
        return ""

    text = _SEGMENT_RE.sub(keep, template)
    return " ".join(text.split())


def scaffold_for(subset_id: str, scaffolds) -> str:
    if scaffolds is None:
        return DEFAULT_SCAFFOLD
    if isinstance(scaffolds, str):
        return scaffolds
    return scaffolds.get(subset_id, DEFAULT_SCAFFOLD)


def active_tokens(t: int, schedule: TokenSchedule | None = None,
                  stage_partition: StagePartition | None = None,
                  ) -> set[tuple[str, str]]:
    """(token, subset_id) pairs whose schedule covers timestep ``t``."""
    if schedule is None:
        schedule = default_token_schedule()
    if stage_partition is None:
        stage_partition = schedule.stage_partition
    stage = stage_partition.stage_of(t)
    return {
        (token, subset_id)
        for token in schedule.entries
        if stage in schedule.stages_of(token)
        for subset_id in schedule.subsets_of(token)
    }


def _schedule_of(tokens) -> TokenSchedule:
    if tokens is None:
        return default_token_schedule()
    if isinstance(tokens, TokenSchedule):
        return tokens
    if isinstance(tokens, TokenSet):
        return tokens.schedule
    raise InversionError(f"expected a TokenSet or TokenSchedule, got {type(tokens).__name__}")


def _cell_prompt(schedule: TokenSchedule, subset_id: str, active: set[str],
                 scaffolds) -> CellPrompt:
    prompt = assemble_scaffold(scaffold_for(subset_id, scaffolds), active)
    present = set(placeholders_in(prompt))
    missing = active - present
    if missing:
        raise InversionError(
            f"scaffold for subset {subset_id!r} is missing a slot for "
            f"{sorted(missing)[0]!r}"
        )
    return CellPrompt(text=prompt)


def build_training_conditioning(t: int, tokens=None, scaffolds=None) -> ConditioningGrid:
    """The routed training grid for one sampled timestep.

    Cells in t's stage carry their scheduled tokens; every other cell keeps
    the bare scaffold, so only embeddings active at ``t`` enter the graph.
    """
    schedule = _schedule_of(tokens)
    t_stage = schedule.stage_partition.stage_of(t)
    cells = {}
    for subset_id in schedule.layer_partition.subset_ids:
        for stage_id in schedule.stage_partition.stage_ids:
            if stage_id == t_stage:
                active = set(schedule.tokens_for_cell(subset_id, stage_id))
            else:
                active = set()
            cells[(subset_id, stage_id)] = _cell_prompt(
                schedule, subset_id, active, scaffolds)
    return build_grid("joint", schedule.layer_partition,
                      schedule.stage_partition, cells)


def matte_conditioning_grid(tokens=None, scaffolds=None) -> ConditioningGrid:
    """The full stage-complete grid: every cell carries its own stage's tokens."""
    schedule = _schedule_of(tokens)
    cells = {}
    for subset_id in schedule.layer_partition.subset_ids:
        for stage_id in schedule.stage_partition.stage_ids:
            active = set(schedule.tokens_for_cell(subset_id, stage_id))
            cells[(subset_id, stage_id)] = _cell_prompt(
                schedule, subset_id, active, scaffolds)
    return build_grid("joint", schedule.layer_partition,
                      schedule.stage_partition, cells)


# ---------------------------------------------------------------------------
# Losses

def compute_losses(noise: torch.Tensor, noise_pred: torch.Tensor,
                   tokens: TokenSet, ground_truth: GroundTruth,
                   sampled_style: torch.Tensor, config: InversionConfig,
                   active: set[str] | None = None) -> dict[str, torch.Tensor]:
    """All loss terms at one sampled step, as graph-connected scalars.

    ``active`` gates the regularizers: L_CS enters L_inv only when <c> is
    active at the sampled timestep, L_O only when <o> is. With ``active=None``
    both enter. The returned L_CS and L_O are always evaluated for logging.
    """
    if noise.shape != noise_pred.shape:
        raise InversionError(
            f"noise shapes disagree: {tuple(noise.shape)} vs {tuple(noise_pred.shape)}"
        )
    for name, vec in (("c", tokens.c), ("s", sampled_style),
                      ("c_gt", ground_truth.c_gt), ("o", tokens.o),
                      ("o_gt", ground_truth.o_gt)):
        if vec.shape != tokens.c.shape:
            raise InversionError(f"vector {name} has mismatched dimension")

    l_r = torch.mean((noise - noise_pred) ** 2)
    cs_gap = torch.sum((tokens.c - sampled_style) ** 2) \
        - torch.sum((ground_truth.c_gt - sampled_style) ** 2)
    l_cs = torch.abs(cs_gap) if config.cs_variant == "absolute" else cs_gap
    l_o = torch.sum((tokens.o - ground_truth.o_gt) ** 2)

    cs_on = active is None or TOKEN_COLOR in active
    o_on = active is None or TOKEN_OBJECT in active
    l_inv = l_r
    if cs_on:
        l_inv = l_inv + config.lambda_cs * l_cs
    if o_on:
        l_inv = l_inv + config.lambda_o * l_o
    return {"L_R": l_r, "L_CS": l_cs, "L_O": l_o, "L_inv": l_inv}


# ---------------------------------------------------------------------------
# Training loops

def _palette_pixels(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype.kind == "f":
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    return arr


def ground_truth_for(reference_image, class_label: str | None, backend,
                     style_pool: tuple[str, ...] = STYLES_TRAIN,
                     palette_image=None) -> GroundTruth:
    """Derive the color and object anchors from the reference itself."""
    if palette_image is None:
        palette_image = _palette_pixels(reference_image)
    phrase = palette_phrase(extract_palette(palette_image))
    if not class_label:
        from .evaluation import nn_label
        from .vocab import DEFAULT_ATTRIBUTES
        class_label = nn_label(reference_image, list(DEFAULT_ATTRIBUTES.objects),
                               backend.embed_image, backend.embed_text)
    return GroundTruth(
        c_gt=backend.token_embedding(phrase),
        o_gt=backend.token_embedding(class_label),
        class_label=class_label,
        style_pool=tuple(style_pool),
        palette_phrase=phrase,
    )


def _init_tokens(backend, config: InversionConfig, names: tuple[str, ...],
                 class_label: str | None) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(config.seed)
    dim = backend.descriptor.embedding_dim
    slots = {}
    for name in names:
        if (config.token_init == "class_word" and name == TOKEN_OBJECT
                and class_label):
            vec = backend.token_embedding(class_label)
        else:
            vec = 0.01 * torch.randn(dim, dtype=torch.float64, generator=gen)
        slots[name] = backend.register_token(name, vec, learnable=True)
    return slots


def _freeze_tokens(backend, slots: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    final = {}
    for name, slot in slots.items():
        vec = slot.detach().clone()
        backend.register_token(name, vec, learnable=False)
        final[name] = vec
    return final


def invert(reference_image, class_label: str | None, config: InversionConfig,
           backend, scaffolds=None, schedule: TokenSchedule | None = None,
           ground_truth: GroundTruth | None = None,
           injection_hook=None) -> tuple[TokenSet, TrainingLog]:
    """Learn <c>, <o>, <s>, <l> from one reference image.

    Each step samples t uniformly from [0, max_timestep), forms z_t from the
    reference latent, routes the stage's scaffold prompts to every layer, and
    updates only the tokens active at t. Returns the final tokens (frozen
    back into the encoder) and the per-step log.
    """
    if schedule is None:
        schedule = default_token_schedule()
    if ground_truth is None:
        ground_truth = ground_truth_for(reference_image, class_label, backend)
    z0 = backend.encode_image(reference_image)
    slots = _init_tokens(backend, config, MATTE_TOKENS,
                         ground_truth.class_label)
    optimizers = {name: torch.optim.Adam([slot], lr=config.lr)
                  for name, slot in slots.items()}
    rng = random.Random(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed)
    max_t = backend.descriptor.max_timestep
    log = TrainingLog()

    for step in range(config.steps):
        for slot in slots.values():
            slot.grad = None
        ts = []
        union_active: set[str] = set()
        totals = {"L_R": 0.0, "L_CS": 0.0, "L_O": 0.0}
        loss_sum = None
        for _ in range(config.batch):
            t = rng.randrange(max_t)
            ts.append(t)
            eps = torch.randn(z0.shape, dtype=z0.dtype, generator=noise_gen)
            z_t = backend.q_sample(z0, t, eps)
            grid = build_training_conditioning(t, schedule, scaffolds)
            conds, _ = backend.conditionings_for(grid, t,
                                                 injection_hook=injection_hook)
            noise_pred = backend.predict_noise(z_t, t, conds)
            style = rng.choice(ground_truth.style_pool)
            style_vec = backend.token_embedding(style)
            active = {tok for tok, _ in active_tokens(t, schedule)}
            union_active |= active
            live = TokenSet(c=slots[TOKEN_COLOR], o=slots[TOKEN_OBJECT],
                            s=slots[TOKEN_STYLE], l=slots[TOKEN_LAYOUT],
                            schedule=schedule)
            losses = compute_losses(eps, noise_pred, live, ground_truth,
                                    style_vec, config, active=active)
            for key in totals:
                totals[key] += float(losses[key].detach())
            loss_sum = losses["L_inv"] if loss_sum is None \
                else loss_sum + losses["L_inv"]
        loss = loss_sum / config.batch
        if not torch.isfinite(loss):
            raise InversionError(
                f"non-finite L_inv={float(loss.detach())} at step {step} (t={ts})"
            )
        # Draws that land where no token is scheduled leave the loss constant;
        # those steps log but cannot update anything.
        if loss.requires_grad:
            loss.backward()
            for name in sorted(union_active):
                optimizers[name].step()
        log.add(StepRecord(
            step=step,
            t=tuple(ts),
            l_r=totals["L_R"] / config.batch,
            l_cs=totals["L_CS"] / config.batch,
            l_o=totals["L_O"] / config.batch,
            l_inv=float(loss.detach()),
            active=tuple(sorted(union_active)),
        ))

    final = _freeze_tokens(backend, slots)
    token_set = TokenSet(c=final[TOKEN_COLOR], o=final[TOKEN_OBJECT],
                         s=final[TOKEN_STYLE], l=final[TOKEN_LAYOUT],
                         schedule=schedule)
    return token_set, log


def baseline_token_names(mode: str) -> tuple[str, ...]:
    if mode == "layer_only_16":
        return tuple(f"<x_{i:02d}>" for i in range(1, 17))
    if mode == "stage_only_10":
        return tuple(f"<y_{i:02d}>" for i in range(1, 11))
    raise InversionError(f"unknown baseline mode {mode!r}; "
                         f"choose one of {BASELINE_MODES}")


def baseline_grid(mode: str) -> ConditioningGrid:
    """Degenerate routing for a baseline: one token per layer or per decile."""
    names = baseline_token_names(mode)
    if mode == "layer_only_16":
        partition = per_layer_partition()
        cells = {
            (f"L{i}", "all"): BASELINE_SCAFFOLD.format(token=names[i - 1])
            for i in range(1, 17)
        }
        return build_grid("layer_only", partition, full_stage_partition(), cells)
    partition = decile_stage_partition()
    cells = {
        ("all", f"d{j}"): BASELINE_SCAFFOLD.format(token=names[j - 1])
        for j in range(1, 11)
    }
    return build_grid("stage_only", full_layer_partition(), partition, cells)


def baseline_invert(reference_image, mode: str, config: InversionConfig,
                    backend, injection_hook=None,
                    ) -> tuple[dict[str, torch.Tensor], TrainingLog]:
    """Train 16 per-layer or 10 per-stage vectors with the reconstruction loss only."""
    names = baseline_token_names(mode)
    grid = baseline_grid(mode)
    z0 = backend.encode_image(reference_image)
    gen = torch.Generator().manual_seed(config.seed)
    dim = backend.descriptor.embedding_dim
    slots = {}
    for name in names:
        vec = 0.01 * torch.randn(dim, dtype=torch.float64, generator=gen)
        slots[name] = backend.register_token(name, vec, learnable=True)
    optimizers = {name: torch.optim.Adam([slot], lr=config.lr)
                  for name, slot in slots.items()}
    rng = random.Random(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed)
    max_t = backend.descriptor.max_timestep
    log = TrainingLog()

    for step in range(config.steps):
        for slot in slots.values():
            slot.grad = None
        ts = []
        loss_sum = None
        active: set[str] = set()
        for _ in range(config.batch):
            t = rng.randrange(max_t)
            ts.append(t)
            eps = torch.randn(z0.shape, dtype=z0.dtype, generator=noise_gen)
            z_t = backend.q_sample(z0, t, eps)
            conds, _ = backend.conditionings_for(grid, t,
                                                 injection_hook=injection_hook)
            noise_pred = backend.predict_noise(z_t, t, conds)
            for layer in range(1, backend.descriptor.n_cross_attention_layers + 1):
                active.update(grid.resolve(layer, t).tokens())
            l_r = torch.mean((eps - noise_pred) ** 2)
            loss_sum = l_r if loss_sum is None else loss_sum + l_r
        loss = loss_sum / config.batch
        if not torch.isfinite(loss):
            raise InversionError(
                f"non-finite L_R={float(loss.detach())} at step {step} (t={ts})"
            )
        loss.backward()
        for name in sorted(active):
            optimizers[name].step()
        logged = float(loss.detach())
        log.add(StepRecord(step=step, t=tuple(ts), l_r=logged, l_cs=0.0,
                           l_o=0.0, l_inv=logged,
                           active=tuple(sorted(active))))

    return _freeze_tokens(backend, slots), log


# ---------------------------------------------------------------------------
# Bundle persistence

def _schedule_to_dict(schedule: TokenSchedule) -> dict:
    return {
        token: {"subsets": sorted(subsets), "stages": sorted(stages)}
        for token, (subsets, stages) in sorted(schedule.entries.items())
    }


def save_bundle(path, vectors: dict[str, torch.Tensor], log: TrainingLog,
                config: InversionConfig, mode: str = "matte",
                schedule: TokenSchedule | None = None,
                class_label: str = "", palette_phrase: str = "",
                style_pool: tuple[str, ...] = ()) -> None:
    """Write a versioned token bundle: header, embeddings, then log records."""
    names = sorted(vectors)
    dims = {int(v.shape[0]) for v in vectors.values()}
    if len(dims) != 1:
        raise InversionError(f"bundle vectors disagree on dimension: {sorted(dims)}")
    header = {
        "format": BUNDLE_FORMAT,
        "mode": mode,
        "dim": dims.pop(),
        "tokens": names,
        "schedule": _schedule_to_dict(schedule) if schedule is not None else None,
        "config": config.as_dict(),
        "class_label": class_label,
        "palette_phrase": palette_phrase,
        "style_pool": list(style_pool),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for name in names:
        values = [float(v) for v in vectors[name].detach().tolist()]
        lines.append(json.dumps({"token": name, "values": values}))
    for rec in log.records:
        lines.append(json.dumps({
            "step": rec.step, "t": list(rec.t), "l_r": rec.l_r,
            "l_cs": rec.l_cs, "l_o": rec.l_o, "l_inv": rec.l_inv,
            "active": list(rec.active),
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class Bundle:
    mode: str
    dim: int
    vectors: dict[str, torch.Tensor]
    schedule: TokenSchedule | None
    config: InversionConfig
    class_label: str
    palette_phrase: str
    style_pool: tuple[str, ...]
    log: TrainingLog

    def token_set(self) -> TokenSet:
        if self.mode != "matte":
            raise InversionError(f"bundle mode {self.mode!r} has no TokenSet")
        return TokenSet(c=self.vectors[TOKEN_COLOR], o=self.vectors[TOKEN_OBJECT],
                        s=self.vectors[TOKEN_STYLE], l=self.vectors[TOKEN_LAYOUT],
                        schedule=self.schedule)

    def register(self, backend) -> None:
        for name, vec in self.vectors.items():
            backend.register_token(name, vec, learnable=False)


def _schedule_from_dict(data: dict | None) -> TokenSchedule | None:
    if data is None:
        return None
    base = default_token_schedule()
    entries = {
        token: (frozenset(spec["subsets"]), frozenset(spec["stages"]))
        for token, spec in data.items()
    }
    return TokenSchedule(layer_partition=base.layer_partition,
                         stage_partition=base.stage_partition,
                         entries=entries)


def load_bundle(path) -> Bundle:
    text = Path(path).read_text(encoding="utf-8")
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise InversionError(f"bundle file {path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != BUNDLE_FORMAT:
        raise InversionError(
            f"unsupported bundle format {header.get('format')!r}, "
            f"expected {BUNDLE_FORMAT!r}"
        )
    names = list(header["tokens"])
    vectors = {}
    log = TrainingLog()
    for line in lines[1:]:
        record = json.loads(line)
        if "token" in record:
            vectors[record["token"]] = torch.tensor(record["values"],
                                                    dtype=torch.float64)
        else:
            log.add(StepRecord(
                step=record["step"], t=tuple(record["t"]), l_r=record["l_r"],
                l_cs=record["l_cs"], l_o=record["l_o"], l_inv=record["l_inv"],
                active=tuple(record["active"]),
            ))
    missing = set(names) - set(vectors)
    if missing:
        raise InversionError(f"bundle is missing embeddings for {sorted(missing)}")
    return Bundle(
        mode=header["mode"],
        dim=header["dim"],
        vectors=vectors,
        schedule=_schedule_from_dict(header.get("schedule")),
        config=InversionConfig(**header["config"]),
        class_label=header.get("class_label", ""),
        palette_phrase=header.get("palette_phrase", ""),
        style_pool=tuple(header.get("style_pool", ())),
        log=log,
    )
