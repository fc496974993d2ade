"""Attribute-transfer evaluation: semantic similarity and disentanglement.

Scores follow the cosine-similarity protocols: token prompts against
ground-truth prompts over matched-seed image pairs, and held-versus-swept
attribute pairs under each routing mode. Every aggregate derives from
persisted per-image scores, using math.fsum so the fold is order-independent
and exactly reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backends.base import SamplerConfig
from .errors import EvalError
from .inversion import (
    Bundle,
    GroundTruth,
    InversionConfig,
    TokenSet,
    baseline_token_names,
)
from .router import (
    TOKEN_COLOR,
    TOKEN_LAYOUT,
    TOKEN_OBJECT,
    TOKEN_STYLE,
    build_grid,
    decile_stage_partition,
    full_layer_partition,
    full_stage_partition,
    per_layer_partition,
    uniform_grid,
)
from .vocab import DEFAULT_ATTRIBUTES

PAIRS = ("layout-color", "layout-object", "layout-style",
         "color-object", "color-style", "object-style")
PAIR_MODES = ("matte", "p16", "s10")

_ATTR_TOKEN = {"color": TOKEN_COLOR, "object": TOKEN_OBJECT,
               "style": TOKEN_STYLE, "layout": TOKEN_LAYOUT}

# Supp-style routing for held attributes in the baseline emulations:
# P+ assigns color/style to the fine-and-moderate layers and object/layout
# to the coarse ones; the stage emulation assigns early deciles to layout,
# the first four to color/style, and the middle band to object.
P16_HELD_LAYERS = {
    "color": tuple(list(range(1, 6)) + list(range(10, 17))),
    "style": tuple(list(range(1, 6)) + list(range(10, 17))),
    "object": (6, 7, 8, 9),
    "layout": (6, 7, 8, 9),
}
S10_HELD_STAGES = {
    "color": ("d1", "d2", "d3", "d4"),
    "style": ("d1", "d2", "d3", "d4"),
    "layout": ("d1", "d2", "d3"),
    "object": ("d4", "d5", "d6", "d7"),
}

_EVAL_SAMPLER = SamplerConfig(steps=10, guidance_scale=1.0)


# ---------------------------------------------------------------------------
# Core metrics

def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise EvalError(f"cosine dimensions disagree: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise EvalError("cosine is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def nn_label(image, candidate_texts, image_encoder, text_encoder) -> str:
    """Candidate whose text embedding is nearest the image embedding."""
    if not candidate_texts:
        raise EvalError("nn_label needs at least one candidate")
    image_vec = image_encoder(image)
    best = None
    best_sim = None
    for text in candidate_texts:
        sim = cosine(image_vec, text_encoder(text))
        if best_sim is None or sim > best_sim:
            best, best_sim = text, sim
    return best


# ---------------------------------------------------------------------------
# Report plumbing

@dataclass(frozen=True)
class PerImageScore:
    metric: str
    subject: str
    detail: str
    seed: int
    score: float


@dataclass(frozen=True)
class ReportRow:
    metric: str
    subject: str
    score: float
    n_images: int
    seeds: tuple[int, ...]
    config_hash: str

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.score <= 1.0 + 1e-9:
            raise EvalError(f"score {self.score} outside [-1, 1]")


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


@dataclass
class EvalReport:
    config: dict = field(default_factory=dict)
    rows: list[ReportRow] = field(default_factory=list)
    per_image: list[PerImageScore] = field(default_factory=list)

    @property
    def hash(self) -> str:
        return config_hash(self.config)

    def add_row(self, metric: str, subject: str, score: float,
                n_images: int, seeds) -> None:
        self.rows.append(ReportRow(metric=metric, subject=subject, score=score,
                                   n_images=n_images, seeds=tuple(seeds),
                                   config_hash=self.hash))

    def score(self, metric: str, subject: str) -> float:
        for row in self.rows:
            if row.metric == metric and row.subject == subject:
                return row.score
        raise EvalError(f"report has no row for ({metric!r}, {subject!r})")

    def aggregate(self, metric: str, subject: str) -> float:
        """Order-independent mean of the persisted per-image scores."""
        scores = [rec.score for rec in self.per_image
                  if rec.metric == metric and rec.subject == subject]
        if not scores:
            raise EvalError(f"no per-image scores for ({metric!r}, {subject!r})")
        return math.fsum(scores) / len(scores)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "subject", "score", "n_images",
                             "seeds", "config_hash"])
            for row in self.rows:
                seeds = ";".join(str(s) for s in row.seeds)
                writer.writerow([row.metric, row.subject, repr(row.score),
                                 row.n_images, seeds, row.config_hash])

    def write_per_image_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "subject", "detail", "seed", "score"])
            for rec in self.per_image:
                writer.writerow([rec.metric, rec.subject, rec.detail,
                                 rec.seed, repr(rec.score)])

    def write_sidecar(self, path) -> None:
        seeds = sorted({rec.seed for rec in self.per_image})
        payload = {"config": self.config, "config_hash": self.hash,
                   "seeds": seeds}
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2)
                              + "\n", encoding="utf-8")


def read_per_image_csv(path) -> list[PerImageScore]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        records = []
        for metric, subject, detail, seed, score in reader:
            records.append(PerImageScore(metric=metric, subject=subject,
                                         detail=detail, seed=int(seed),
                                         score=float(score)))
    return records


# ---------------------------------------------------------------------------
# Prompt assembly

def attribute_prompt(color: str | None = None, object: str | None = None,
                     style: str | None = None, layout: str | None = None) -> str:
    """Compose "a red colored watercolor style photo of dog in <l> layout"-shaped prompts."""
    parts = ["a"]
    if color:
        parts.append(f"{color} colored")
    if style:
        parts.append(f"{style} style")
    parts.append("photo")
    if object:
        parts.append(f"of {object}")
    if layout:
        parts.append(f"in {layout} layout")
    return " ".join(parts)


def _sample_image(backend, grid, seed: int, sampler: SamplerConfig) -> np.ndarray:
    cfg = SamplerConfig(steps=sampler.steps,
                        guidance_scale=sampler.guidance_scale, seed=seed)
    return backend.sample(grid, cfg).image


# ---------------------------------------------------------------------------
# Token semantics (per-attribute similarity to ground truth)

def token_semantic_eval(tokens: TokenSet, ground_truth: GroundTruth, backend,
                        n: int = 64, reference_image=None,
                        style_candidates=None,
                        sampler: SamplerConfig = _EVAL_SAMPLER,
                        base_seed: int = 0) -> EvalReport:
    """Compare each attribute token against its ground-truth text.

    For each of <c>, <o>, <s>: synthesize ``n`` images from the token prompt
    and ``n`` from the ground-truth prompt with matched seeds (pair i shares
    one initial latent), then report the mean matched-pair image-image cosine
    plus the text-text cosine of the two prompts.
    """
    for name, vec in ((TOKEN_COLOR, tokens.c), (TOKEN_OBJECT, tokens.o),
                      (TOKEN_STYLE, tokens.s), (TOKEN_LAYOUT, tokens.l)):
        backend.register_token(name, vec, learnable=False)

    if not ground_truth.palette_phrase:
        raise EvalError("ground truth is missing the palette phrase for <c>")
    if not ground_truth.class_label:
        raise EvalError("ground truth is missing the class label for <o>")
    if style_candidates is None:
        style_candidates = list(DEFAULT_ATTRIBUTES.styles_eval)
    if reference_image is None:
        raise EvalError("ground truth for <s> needs the reference image "
                        "(nearest-style lookup)")
    style_label = nn_label(reference_image, style_candidates,
                           backend.embed_image, backend.embed_text)

    cases = (
        ("c", attribute_prompt(color=TOKEN_COLOR),
         attribute_prompt(color=ground_truth.palette_phrase)),
        ("o", attribute_prompt(object=TOKEN_OBJECT),
         attribute_prompt(object=ground_truth.class_label)),
        ("s", attribute_prompt(style=TOKEN_STYLE),
         attribute_prompt(style=style_label)),
    )

    seeds = [base_seed + i for i in range(n)]
    report = EvalReport(config={
        "eval": "token_semantic", "n": n, "base_seed": base_seed,
        "steps": sampler.steps, "guidance_scale": sampler.guidance_scale,
        "style_label": style_label,
    })
    for attr, token_prompt, gt_prompt in cases:
        token_grid = uniform_grid(token_prompt)
        gt_grid = uniform_grid(gt_prompt)
        for seed in seeds:
            img_tok = _sample_image(backend, token_grid, seed, sampler)
            img_gt = _sample_image(backend, gt_grid, seed, sampler)
            score = cosine(backend.embed_image(img_tok),
                           backend.embed_image(img_gt))
            report.per_image.append(PerImageScore(
                metric="image_image", subject=attr, detail=gt_prompt,
                seed=seed, score=score))
        report.add_row("image_image", attr,
                       report.aggregate("image_image", attr), n, seeds)
        text_sim = cosine(backend.embed_text(token_prompt),
                          backend.embed_text(gt_prompt))
        report.add_row("text_text", attr, text_sim, 0, ())
    return report


# ---------------------------------------------------------------------------
# Pairwise disentanglement

def _held_vectors(inversion_output, mode: str) -> dict:
    if isinstance(inversion_output, Bundle):
        if mode == "matte":
            wanted = (TOKEN_COLOR, TOKEN_OBJECT, TOKEN_STYLE, TOKEN_LAYOUT)
            missing = [t for t in wanted if t not in inversion_output.vectors]
            if missing:
                raise EvalError(f"bundle lacks attribute tokens {missing}; "
                                f"was it inverted in mode {mode!r}?")
            return {name: inversion_output.vectors[name] for name in wanted}
        return dict(inversion_output.vectors)
    if isinstance(inversion_output, TokenSet):
        if mode != "matte":
            raise EvalError(f"mode {mode!r} needs baseline vectors, got a TokenSet")
        return {TOKEN_COLOR: inversion_output.c, TOKEN_OBJECT: inversion_output.o,
                TOKEN_STYLE: inversion_output.s, TOKEN_LAYOUT: inversion_output.l}
    if isinstance(inversion_output, dict):
        return dict(inversion_output)
    raise EvalError(
        f"unsupported inversion output {type(inversion_output).__name__}")


def _matte_schedule(inversion_output):
    if isinstance(inversion_output, Bundle) and inversion_output.schedule:
        return inversion_output.schedule
    if isinstance(inversion_output, TokenSet):
        return inversion_output.schedule
    from .router import default_token_schedule
    return default_token_schedule()


def _pair_grid(mode: str, held: str, sweep_prompt: str, schedule):
    """Grid holding one attribute's learned conditioning while sweeping a prompt.

    Retained cells prefix the learned token to the sweep prompt; all other
    cells carry the sweep prompt alone.
    """
    if mode == "matte":
        token = _ATTR_TOKEN[held]
        cells = {}
        for subset_id in schedule.layer_partition.subset_ids:
            for stage_id in schedule.stage_partition.stage_ids:
                if schedule.is_active(token, subset_id, stage_id):
                    cells[(subset_id, stage_id)] = f"{token} {sweep_prompt}"
                else:
                    cells[(subset_id, stage_id)] = sweep_prompt
        return build_grid("joint", schedule.layer_partition,
                          schedule.stage_partition, cells)
    if mode == "p16":
        names = baseline_token_names("layer_only_16")
        held_layers = set(P16_HELD_LAYERS[held])
        cells = {
            (f"L{i}", "all"): (f"{names[i - 1]} {sweep_prompt}"
                               if i in held_layers else sweep_prompt)
            for i in range(1, 17)
        }
        return build_grid("layer_only", per_layer_partition(),
                          full_stage_partition(), cells)
    if mode == "s10":
        names = baseline_token_names("stage_only_10")
        held_stages = set(S10_HELD_STAGES[held])
        cells = {
            ("all", f"d{j}"): (f"{names[j - 1]} {sweep_prompt}"
                               if f"d{j}" in held_stages else sweep_prompt)
            for j in range(1, 11)
        }
        return build_grid("stage_only", full_layer_partition(),
                          decile_stage_partition(), cells)
    raise EvalError(f"unknown pair mode {mode!r}; choose one of {PAIR_MODES}")


def _sweep_list(attr: str) -> list[str]:
    return {"color": list(DEFAULT_ATTRIBUTES.colors),
            "object": list(DEFAULT_ATTRIBUTES.objects),
            "style": list(DEFAULT_ATTRIBUTES.styles_eval)}[attr]


def pair_disentanglement_eval(inversion_output, mode: str, pair: str, backend,
                              n: int = 64, sweep_values=None,
                              held_text: str | None = None,
                              sampler: SamplerConfig = _EVAL_SAMPLER,
                              base_seed: int = 0) -> EvalReport:
    """Hold one inverted attribute, sweep another, and score both transfers.

    Each generated image is scored against the swept value's text and, when
    the held attribute has ground-truth text (layout does not), against the
    held text too; the two similarities average into one per-image score.
    The aggregate row ("pair_score", pair) is the mean over sweep x seeds.
    """
    if pair not in PAIRS:
        raise EvalError(f"unknown pair {pair!r}; choose one of {PAIRS}")
    held, swept = pair.split("-")
    vectors = _held_vectors(inversion_output, mode)
    if mode == "matte" and _ATTR_TOKEN[held] not in vectors:
        raise EvalError(f"inversion output lacks the held attribute {held!r}")
    for name, vec in vectors.items():
        backend.register_token(name, vec, learnable=False)

    if held_text is None and isinstance(inversion_output, Bundle):
        if held == "color":
            held_text = inversion_output.palette_phrase or None
        elif held == "object":
            held_text = inversion_output.class_label or None
    if held == "layout":
        held_text = None
    held_prompt = attribute_prompt(**{held: held_text}) if held_text else None

    if sweep_values is None:
        sweep_values = _sweep_list(swept)
    if not sweep_values:
        raise EvalError("sweep list must be non-empty")
    schedule = _matte_schedule(inversion_output) if mode == "matte" else None

    seeds = [base_seed + i for i in range(n)]
    report = EvalReport(config={
        "eval": "pair_disentanglement", "pair": pair, "mode": mode, "n": n,
        "base_seed": base_seed, "steps": sampler.steps,
        "guidance_scale": sampler.guidance_scale,
        "sweep": list(sweep_values), "held_text": held_text,
    })
    for value in sweep_values:
        sweep_prompt = attribute_prompt(**{swept: value})
        grid = _pair_grid(mode, held, sweep_prompt, schedule)
        swept_text_vec = backend.embed_text(sweep_prompt)
        held_text_vec = backend.embed_text(held_prompt) if held_prompt else None
        for seed in seeds:
            image = _sample_image(backend, grid, seed, sampler)
            image_vec = backend.embed_image(image)
            swept_sim = cosine(image_vec, swept_text_vec)
            report.per_image.append(PerImageScore(
                metric="image_text_swept", subject=pair, detail=value,
                seed=seed, score=swept_sim))
            if held_text_vec is not None:
                held_sim = cosine(image_vec, held_text_vec)
                report.per_image.append(PerImageScore(
                    metric="image_text_held", subject=pair, detail=value,
                    seed=seed, score=held_sim))
                combined = (swept_sim + held_sim) / 2.0
            else:
                combined = swept_sim
            report.per_image.append(PerImageScore(
                metric="pair_score", subject=pair, detail=value,
                seed=seed, score=combined))
    report.add_row("pair_score", pair, report.aggregate("pair_score", pair),
                   len(sweep_values) * n, seeds)
    return report


# ---------------------------------------------------------------------------
# Ablation

def ablation_eval(reference, config: InversionConfig, backend,
                  class_label: str | None = None, n: int = 16,
                  sampler: SamplerConfig = _EVAL_SAMPLER,
                  base_seed: int = 0) -> EvalReport:
    """Invert with the reconstruction loss alone and with the full loss,
    then score both token sets against the same ground truth."""
    from .inversion import ground_truth_for, invert

    ground_truth = ground_truth_for(reference, class_label, backend)
    variants = (
        ("l_r_only", replace(config, lambda_cs=0.0, lambda_o=0.0)),
        ("full", config),
    )
    report = EvalReport(config={
        "eval": "ablation", "n": n, "base_seed": base_seed,
        "steps": sampler.steps, "guidance_scale": sampler.guidance_scale,
        "inversion": config.as_dict(),
    })
    for variant, variant_config in variants:
        tokens, _ = invert(reference, ground_truth.class_label,
                           variant_config, backend, ground_truth=ground_truth)
        sub = token_semantic_eval(tokens, ground_truth, backend, n=n,
                                  reference_image=reference, sampler=sampler,
                                  base_seed=base_seed)
        for row in sub.rows:
            report.add_row(row.metric, f"{variant}.{row.subject}", row.score,
                           row.n_images, row.seeds)
        for rec in sub.per_image:
            report.per_image.append(PerImageScore(
                metric=rec.metric, subject=f"{variant}.{rec.subject}",
                detail=rec.detail, seed=rec.seed, score=rec.score))
    return report
