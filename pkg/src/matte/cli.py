"""Command-line entry point: invert, generate, probe, eval, palette.

Every run resolves its configuration (flags over config file over defaults),
writes a RunManifest before any output, and reports failures as one
machine-parsable JSON line on stderr with exit codes 3 (config) and 4
(backend); argparse itself exits 2 on unknown commands.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .backends import SamplerConfig, backend_from_config
from .errors import ConfigError, MatteError
from .evaluation import (
    PAIRS,
    ablation_eval,
    pair_disentanglement_eval,
    token_semantic_eval,
)
from .images import load_image_gray, load_image_rgb, save_image
from .inversion import (
    GroundTruth,
    InversionConfig,
    baseline_invert,
    ground_truth_for,
    invert,
    load_bundle,
    save_bundle,
)
from .manifest import RunManifest, sha256_file
from .palette import extract_palette, name_color, palette_phrase
from .probe import ProbeSpec, render_heatmaps, run_probe, summarize_attention, \
    write_saliency_csv
from .router import expand_prompt, grid_from_json, placeholders_in, uniform_grid
from .vocab import STYLES_TRAIN

MANIFEST_NAME = "manifest.json"

_EXIT_BY_CATEGORY = {
    "config": 3,
    "grid": 3,
    "inversion": 3,
    "eval": 3,
    "backend": 4,
    "encoder": 4,
}

MODE_MAP = {"matte": "matte", "p16": "layer_only_16", "s10": "stage_only_10"}


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _pick(flag_value, file_cfg: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if key in file_cfg:
        return file_cfg[key]
    return default


def _backend_config(args, file_cfg: dict):
    spec = _pick(getattr(args, "backend", None), file_cfg, "backend", "toy")
    if isinstance(spec, str) and spec.endswith(".json") and Path(spec).exists():
        spec = json.loads(Path(spec).read_text(encoding="utf-8"))
    return spec


def _inversion_config(args, file_cfg: dict) -> InversionConfig:
    return InversionConfig(
        lr=float(_pick(args.lr, file_cfg, "lr", 5e-3)),
        steps=int(_pick(args.steps, file_cfg, "steps", 500)),
        batch=int(_pick(args.batch, file_cfg, "batch", 1)),
        lambda_cs=float(_pick(args.lambda_cs, file_cfg, "lambda_cs", 0.1)),
        lambda_o=float(_pick(args.lambda_o, file_cfg, "lambda_o", 0.1)),
        cs_variant=_pick(args.cs_variant, file_cfg, "cs_variant", "absolute"),
        seed=int(_pick(args.seed, file_cfg, "seed", 0)),
        token_init=_pick(args.token_init, file_cfg, "token_init", "class_word"),
    )


def _sampler(args, file_cfg: dict, default_steps: int,
             default_guidance: float) -> SamplerConfig:
    return SamplerConfig(
        steps=int(_pick(getattr(args, "sample_steps", None), file_cfg,
                        "sample_steps", default_steps)),
        guidance_scale=float(_pick(getattr(args, "guidance", None), file_cfg,
                                   "guidance_scale", default_guidance)),
        seed=int(_pick(getattr(args, "seed", None), file_cfg, "seed", 0)),
    )


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    if out.suffix:
        out = out.parent
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out_dir: Path, command: str, config: dict, seeds,
                    inputs: dict, outputs) -> None:
    manifest = RunManifest(
        command=command,
        config=config,
        seeds=tuple(seeds),
        version=__version__,
        input_hashes={name: sha256_file(path) for name, path in inputs.items()},
        output_paths=tuple(outputs),
    )
    manifest.write(out_dir / MANIFEST_NAME)


# ---------------------------------------------------------------------------
# Commands

def _cmd_invert(args) -> int:
    file_cfg = _load_config_file(args.config)
    inv_cfg = _inversion_config(args, file_cfg)
    backend_cfg = _backend_config(args, file_cfg)
    backend = backend_from_config(backend_cfg)
    out_dir = _out_dir(args)
    bundle_path = out_dir / "tokens.bin"

    resolved = {
        "backend": backend_cfg,
        "mode": args.mode,
        "class_label": args.class_label,
        "inversion": inv_cfg.as_dict(),
    }
    _write_manifest(out_dir, "invert", resolved, [inv_cfg.seed],
                    {"image": args.image}, [bundle_path.name])

    reference = load_image_gray(args.image)
    palette_image = load_image_rgb(args.image)
    if args.mode == "matte":
        ground_truth = ground_truth_for(reference, args.class_label, backend,
                                        palette_image=palette_image)
        tokens, log = invert(reference, ground_truth.class_label, inv_cfg,
                             backend, ground_truth=ground_truth)
        save_bundle(
            bundle_path,
            {name: tokens.vector(name) for name in ("<c>", "<o>", "<s>", "<l>")},
            log, inv_cfg, mode="matte", schedule=tokens.schedule,
            class_label=ground_truth.class_label,
            palette_phrase=ground_truth.palette_phrase,
            style_pool=ground_truth.style_pool,
        )
    else:
        vectors, log = baseline_invert(reference, MODE_MAP[args.mode],
                                       inv_cfg, backend)
        save_bundle(bundle_path, vectors, log, inv_cfg,
                    mode=MODE_MAP[args.mode],
                    class_label=args.class_label or "",
                    style_pool=STYLES_TRAIN)
    print(f"wrote {bundle_path}")
    return 0


def _cmd_generate(args) -> int:
    file_cfg = _load_config_file(args.config)
    backend_cfg = _backend_config(args, file_cfg)
    backend = backend_from_config(backend_cfg)
    sampler = _sampler(args, file_cfg, default_steps=50, default_guidance=7.5)
    out_dir = _out_dir(args)
    image_path = out_dir / "generated.png"

    bundle = None
    inputs = {}
    if args.bundle:
        bundle = load_bundle(args.bundle)
        bundle.register(backend)
        inputs["bundle"] = args.bundle

    tokens = placeholders_in(args.prompt)
    known = set(bundle.vectors) if bundle else set()
    missing = [tok for tok in tokens if tok not in known]
    if missing:
        raise ConfigError(
            f"prompt references tokens not in the bundle: {missing}"
        )
    if (bundle is not None and bundle.schedule is not None
            and args.policy != "uniform"
            and any(tok in bundle.schedule.entries for tok in tokens)):
        grid = expand_prompt(args.prompt, bundle.schedule, policy=args.policy)
    else:
        grid = uniform_grid(args.prompt)

    resolved = {
        "backend": backend_cfg,
        "prompt": args.prompt,
        "policy": args.policy,
        "steps": sampler.steps,
        "guidance_scale": sampler.guidance_scale,
        "seed": sampler.seed,
    }
    _write_manifest(out_dir, "generate", resolved, [sampler.seed], inputs,
                    [image_path.name])

    out = backend.sample(grid, sampler)
    save_image(image_path, out.image)
    print(f"wrote {image_path}")
    return 0


def _cmd_probe(args) -> int:
    file_cfg = _load_config_file(args.config)
    backend_cfg = _backend_config(args, file_cfg)
    backend = backend_from_config(backend_cfg)
    sampler = _sampler(args, file_cfg, default_steps=50, default_guidance=7.5)
    out_dir = _out_dir(args)

    grid_text = Path(args.spec).read_text(encoding="utf-8")
    grid = grid_from_json(grid_text)
    tracked = tuple(tok.strip() for tok in args.track.split(",") if tok.strip())
    spec = ProbeSpec(grid=grid, tracked_tokens=tracked, sampler=sampler)

    outputs = ["probe.png", "stack.bin"]
    for token in tracked:
        outputs.append(f"saliency_{token.strip('<>')}.csv")
    resolved = {
        "backend": backend_cfg,
        "track": list(tracked),
        "steps": sampler.steps,
        "guidance_scale": sampler.guidance_scale,
        "seed": sampler.seed,
    }
    _write_manifest(out_dir, "probe", resolved, [sampler.seed],
                    {"spec": args.spec}, outputs)

    image, stack = run_probe(spec, backend)
    save_image(out_dir / "probe.png", image)
    stack.save(out_dir / "stack.bin")
    for token in tracked:
        summary = summarize_attention(stack, token)
        write_saliency_csv(summary, out_dir / f"saliency_{token.strip('<>')}.csv")
        render_heatmaps(summary, out_dir / "heatmaps")
    print(f"wrote probe outputs to {out_dir}")
    return 0


def _report_paths(args, out_dir: Path) -> tuple[Path, Path, Path]:
    out = getattr(args, "out", None)
    if out and str(out).endswith(".csv"):
        base = Path(out)
        base.parent.mkdir(parents=True, exist_ok=True)
    else:
        base = out_dir / "report.csv"
    stem = base.with_suffix("")
    return base, Path(f"{stem}.per_image.csv"), Path(f"{stem}.json")


def _write_report(report, args, out_dir: Path, command: str, backend_cfg,
                  inputs: dict, seeds) -> None:
    report_path, per_image_path, sidecar_path = _report_paths(args, out_dir)
    manifest_cfg = {**report.config, "backend": backend_cfg}
    _write_manifest(out_dir, command, manifest_cfg, seeds, inputs,
                    [report_path.name, per_image_path.name, sidecar_path.name])
    report.write_csv(report_path)
    report.write_per_image_csv(per_image_path)
    report.write_sidecar(sidecar_path)
    print(f"wrote {report_path}")


def _ground_truth_from_bundle(bundle, backend) -> GroundTruth:
    if not bundle.palette_phrase or not bundle.class_label:
        raise ConfigError(
            "bundle lacks ground-truth phrase or class label; "
            "re-run invert in matte mode"
        )
    return GroundTruth(
        c_gt=backend.token_embedding(bundle.palette_phrase),
        o_gt=backend.token_embedding(bundle.class_label),
        class_label=bundle.class_label,
        style_pool=bundle.style_pool or STYLES_TRAIN,
        palette_phrase=bundle.palette_phrase,
    )


def _cmd_eval_tokens(args) -> int:
    file_cfg = _load_config_file(args.config)
    backend_cfg = _backend_config(args, file_cfg)
    backend = backend_from_config(backend_cfg)
    sampler = _sampler(args, file_cfg, default_steps=10, default_guidance=1.0)
    out_dir = _out_dir(args)

    bundle = load_bundle(args.bundle)
    if bundle.mode != "matte":
        raise ConfigError("eval tokens needs a matte-mode bundle")
    bundle.register(backend)
    ground_truth = _ground_truth_from_bundle(bundle, backend)
    reference = load_image_gray(args.image)

    report = token_semantic_eval(
        bundle.token_set(), ground_truth, backend, n=args.n,
        reference_image=reference, sampler=sampler, base_seed=args.base_seed)
    _write_report(report, args, out_dir, "eval-tokens", backend_cfg,
                  {"bundle": args.bundle, "image": args.image},
                  [args.base_seed + i for i in range(args.n)])
    return 0


def _cmd_eval_pairs(args) -> int:
    file_cfg = _load_config_file(args.config)
    backend_cfg = _backend_config(args, file_cfg)
    backend = backend_from_config(backend_cfg)
    sampler = _sampler(args, file_cfg, default_steps=10, default_guidance=1.0)
    out_dir = _out_dir(args)

    bundle = load_bundle(args.bundle)
    bundle.register(backend)
    sweep = None
    if args.sweep:
        sweep = [v.strip() for v in args.sweep.split(",") if v.strip()]

    report = pair_disentanglement_eval(
        bundle, args.mode, args.pair, backend, n=args.n, sweep_values=sweep,
        held_text=args.held_text, sampler=sampler, base_seed=args.base_seed)
    _write_report(report, args, out_dir, "eval-pairs", backend_cfg,
                  {"bundle": args.bundle},
                  [args.base_seed + i for i in range(args.n)])
    return 0


def _cmd_eval_ablation(args) -> int:
    file_cfg = _load_config_file(args.config)
    backend_cfg = _backend_config(args, file_cfg)
    backend = backend_from_config(backend_cfg)
    sampler = _sampler(args, file_cfg, default_steps=10, default_guidance=1.0)
    inv_cfg = _inversion_config(args, file_cfg)
    out_dir = _out_dir(args)

    reference = load_image_gray(args.image)
    report = ablation_eval(reference, inv_cfg, backend,
                           class_label=args.class_label, n=args.n,
                           sampler=sampler, base_seed=args.base_seed)
    _write_report(report, args, out_dir, "eval-ablation", backend_cfg,
                  {"image": args.image},
                  [args.base_seed + i for i in range(args.n)])
    return 0


def _cmd_palette(args) -> int:
    file_cfg = _load_config_file(args.config)
    n = int(_pick(args.n, file_cfg, "n", 5))
    out_dir = _out_dir(args)
    _write_manifest(out_dir, "palette", {"n": n}, [],
                    {"image": args.image}, [])
    image = load_image_rgb(args.image)
    palette = extract_palette(image, n=n)
    for rgb, freq in palette.entries:
        name = name_color(rgb)
        print(f"{rgb[0]},{rgb[1]},{rgb[2]} {freq!r} {name}")
    print(palette_phrase(palette))
    return 0


# ---------------------------------------------------------------------------
# Parser

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", help="backend name or config JSON path")
    parser.add_argument("--seed", type=int, help="RNG seed")
    parser.add_argument("--out", help="output directory (or report path)")
    parser.add_argument("--config", help="JSON config file")


def _add_inversion_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--lambda-cs", dest="lambda_cs", type=float)
    parser.add_argument("--lambda-o", dest="lambda_o", type=float)
    parser.add_argument("--cs-variant", dest="cs_variant",
                        choices=["literal", "absolute"])
    parser.add_argument("--token-init", dest="token_init",
                        choices=["class_word", "random"])


def _add_sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--sample-steps", dest="sample_steps", type=int)
    parser.add_argument("--guidance", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matte",
        description="Routed multi-prompt conditioning, attribute inversion, "
                    "and disentanglement evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="learn attribute tokens from one image")
    p.add_argument("image")
    p.add_argument("--class", dest="class_label", default=None,
                   help="object class label (auto-inferred when omitted)")
    p.add_argument("--mode", choices=sorted(MODE_MAP), default="matte")
    _add_inversion_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("generate", help="sample an image from a prompt")
    p.add_argument("--bundle", help="token bundle file")
    p.add_argument("--prompt", required=True)
    p.add_argument("--policy", default="active_cells_only",
                   choices=["active_cells_only", "everywhere", "uniform"])
    _add_sampler_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("probe", help="routed sampling with attention capture")
    p.add_argument("--spec", required=True, help="grid config JSON")
    p.add_argument("--track", required=True,
                   help="comma-separated words to track")
    _add_sampler_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_probe)

    ev = sub.add_parser("eval", help="similarity and disentanglement reports")
    ev_sub = ev.add_subparsers(dest="eval_command", required=True)

    p = ev_sub.add_parser("tokens", help="per-attribute semantic similarity")
    p.add_argument("--bundle", required=True)
    p.add_argument("--image", required=True, help="reference image")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--base-seed", dest="base_seed", type=int, default=0)
    _add_sampler_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_eval_tokens)

    p = ev_sub.add_parser("pairs", help="held-vs-swept disentanglement score")
    p.add_argument("--bundle", required=True)
    p.add_argument("--pair", required=True, choices=list(PAIRS))
    p.add_argument("--mode", choices=sorted(MODE_MAP), default="matte")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--sweep", help="comma-separated sweep values")
    p.add_argument("--held-text", dest="held_text")
    p.add_argument("--base-seed", dest="base_seed", type=int, default=0)
    _add_sampler_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_eval_pairs)

    p = ev_sub.add_parser("ablation", help="reconstruction-only vs full loss")
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_label", default=None)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--base-seed", dest="base_seed", type=int, default=0)
    _add_inversion_flags(p)
    _add_sampler_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_eval_ablation)

    p = sub.add_parser("palette", help="dominant colors of an image")
    p.add_argument("image")
    p.add_argument("--n", type=int)
    _add_common(p)
    p.set_defaults(func=_cmd_palette)

    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except MatteError as exc:
        line = json.dumps({"error": exc.category, "message": str(exc)})
        print(line, file=sys.stderr)
        return _EXIT_BY_CATEGORY.get(exc.category, 1)


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
