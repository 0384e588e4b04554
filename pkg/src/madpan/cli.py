"""Command-line entry points: generate, evaluate, ablate, bench.

Exit codes: 0 ok, 1 compute error, 2 config/plugin error. All artifacts land
under --out with a fixed layout (images/, manifests/, reports/, features/).
A JSON config file (--config) overrides defaults; explicit flags override
the config file.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import codec, metrics, reporting, sampler
from .backbone import ToyDenoiser, ToyDenoiserConfig, make_toy_model
from .conditioning import ToyTextEmbedder
from .features import ExtractorNotFound, get_extractor
from .mad import STAGE_PRESETS, MergeSchedule
from .tiling import PanoramaSpec, TilingError

EXIT_OK = 0
EXIT_COMPUTE = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    pass


def _add_backbone_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backbone", default="toy", choices=["toy"],
                   help="noise-prediction backbone")
    p.add_argument("--backbone-seed", type=int, default=0,
                   help="parameter init seed for the toy backbone")
    p.add_argument("--params", default=None,
                   help="toy-parameter file to load instead of seeded init")
    p.add_argument("--latent-scale", type=int, default=4,
                   help="decoder upsample factor")
    p.add_argument("--latent-channels", type=int, default=4)
    p.add_argument("--timesteps", type=int, default=100,
                   help="length of the training noise schedule")


def _add_geometry_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--width", type=int, default=256, help="output width in pixels")
    p.add_argument("--height", type=int, default=64, help="output height in pixels")
    p.add_argument("--stride", type=int, default=None,
                   help="view stride in latent cells (default: L/4)")
    p.add_argument("--strict-tiling", action="store_true",
                   help="reject non-stride-divisible canvases instead of clamping")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="madpan",
        description="Joint-diffusion panorama generation with merged attention",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate one panorama")
    g.add_argument("--prompt", default="")
    g.add_argument("--tau", type=int, default=0,
                   help="number of initial steps with merged attention")
    g.add_argument("--blocks", default="all", choices=sorted(STAGE_PRESETS),
                   help="which attention stages merge")
    g.add_argument("--steps", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scheduler", default="ddim", choices=["ddim", "lcm"])
    g.add_argument("--guidance", type=float, default=1.0)
    g.add_argument("--eta", type=float, default=0.0)
    g.add_argument("--token-cap", type=int, default=None)
    g.add_argument("--dump-latents", action="store_true")
    g.add_argument("--replay", default=None,
                   help="replay a manifest instead of building a new config")
    g.add_argument("--name", default=None, help="output file stem")
    _add_geometry_flags(g)
    _add_backbone_flags(g)

    e = sub.add_parser("evaluate", help="score a directory of generated images")
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", default=None)
    e.add_argument("--prompt", default="")
    e.add_argument("--scores", default="all", choices=sorted(metrics.SCORE_GROUPS))
    e.add_argument("--extractor", default="randconv")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--cache", action="store_true",
                   help="cache per-image features under <out>/features")

    a = sub.add_parser("ablate", help="sweep tau or block stages")
    a.add_argument("--sweep", required=True,
                   help="tau=0,5,15 or blocks=none,mid,down,up,all")
    a.add_argument("--prompt", default="")
    a.add_argument("--n", type=int, default=3, help="images per sweep value")
    a.add_argument("--steps", type=int, default=10)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--guidance", type=float, default=1.0)
    a.add_argument("--extractor", default="randconv")
    a.add_argument("--reference", default=None,
                   help="square reference images for distribution scores")
    _add_geometry_flags(a)
    _add_backbone_flags(a)

    b = sub.add_parser("bench", help="per-step runtime at increasing widths")
    b.add_argument("--widths", default=None,
                   help="comma-separated pixel widths (default L,2L,4L,8L)")
    b.add_argument("--repeats", type=int, default=3)
    _add_geometry_flags(b)
    _add_backbone_flags(b)

    for p in (g, e, a, b):
        p.add_argument("--out", default="out", help="artifact directory")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--jobs", type=int, default=None,
                       help="cap on worker threads")
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        sub = {
            act.dest: act for act in parser._subparsers._group_actions[0]
            .choices[args.command]._actions
        }
        unknown = [k for k in cfg if k not in sub]
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        # config overrides defaults; explicit flags override config
        for sp in parser._subparsers._group_actions[0].choices.values():
            sp.set_defaults(**{k: v for k, v in cfg.items()
                               if k in {a.dest for a in sp._actions}})
        args = parser.parse_args(argv)
    return args


def _out_dirs(out: str) -> dict[str, Path]:
    root = Path(out)
    dirs = {name: root / name for name in ("images", "manifests", "reports", "features")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _build_runtime(args) -> dict:
    n = args.latent_scale
    height, width = args.height, args.width
    if height % n or width % n:
        raise ConfigError(f"image dims must be divisible by latent scale {n}")
    view_size = min(height, width) // n
    stride = args.stride if args.stride is not None else max(1, view_size // 4)
    pano = PanoramaSpec(
        image_height=height, image_width=width, latent_scale=n,
        latent_channels=args.latent_channels, view_size=view_size, stride=stride,
    )
    orientation = "horizontal" if width >= height else "vertical"
    config = ToyDenoiserConfig(latent_channels=args.latent_channels)
    if args.params:
        model = ToyDenoiser(config)
        model.load_state_dict(codec.load_params(args.params))
        params_sha = hashlib.sha256(Path(args.params).read_bytes()).hexdigest()
        backbone_info = {"id": "toy", "config": config.to_dict(),
                         "params_path": str(args.params), "params_sha256": params_sha}
    else:
        model = make_toy_model(config, args.backbone_seed)
        backbone_info = {"id": "toy", "config": config.to_dict(),
                         "init_seed": args.backbone_seed}
    return {
        "pano": pano,
        "orientation": orientation,
        "tiling_mode": "strict" if args.strict_tiling else "clamp",
        "model": model,
        "backbone_info": backbone_info,
        "noise_schedule": sampler.NoiseSchedule.default_toy(args.timesteps),
        "decoder": codec.DecoderSpec(
            kind="toy-linear", latent_scale=n,
            latent_channels=args.latent_channels, output_channels=3,
        ),
        "embedder": ToyTextEmbedder(dim=config.context_dim),
    }


def _generate_one(args, rt, dirs, tau, blocks, seed, name) -> Path:
    schedule = MergeSchedule.preset(blocks, tau=tau, total_steps=args.steps)
    mode = "consistency" if getattr(args, "scheduler", "ddim") == "lcm" else "ddim"
    cfg = sampler.SamplerConfig(
        mode=mode, steps=args.steps, guidance_scale=args.guidance,
        eta=getattr(args, "eta", 0.0), seed=seed,
    )
    dump_dir = None
    if getattr(args, "dump_latents", False):
        dump_dir = dirs["manifests"] / f"{name}_latents"
    image, manifest, _ = sampler.generate_panorama(
        rt["pano"], args.prompt, schedule, cfg, rt["model"], rt["decoder"],
        rt["noise_schedule"], rt["embedder"], orientation=rt["orientation"],
        tiling_mode=rt["tiling_mode"], backbone_info=rt["backbone_info"],
        token_cap=getattr(args, "token_cap", None), dump_latents_dir=dump_dir,
    )
    img_path = dirs["images"] / f"{name}.png"
    codec.write_image(image, img_path)
    codec.write_manifest(manifest, dirs["manifests"] / f"{name}.json")
    return img_path


def cmd_generate(args) -> int:
    dirs = _out_dirs(args.out)
    if args.replay:
        manifest = codec.load_manifest(args.replay)
        image, new_manifest = sampler.replay_run(manifest)
        name = args.name or f"replay_{Path(args.replay).stem}"
        img_path = dirs["images"] / f"{name}.png"
        codec.write_image(image, img_path)
        codec.write_manifest(new_manifest, dirs["manifests"] / f"{name}.json")
        print(img_path)
        return EXIT_OK
    rt = _build_runtime(args)
    name = args.name or f"gen_s{args.seed}_tau{args.tau}_{args.blocks}"
    img_path = _generate_one(args, rt, dirs, args.tau, args.blocks, args.seed, name)
    print(img_path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dirs = _out_dirs(args.out)
    extractor = get_extractor(args.extractor)
    needs_ref = any(
        s in metrics.SCORE_GROUPS[args.scores] for s in ("fid", "kid", "mgiqa")
    )
    if needs_ref and not args.reference:
        raise ConfigError("distribution scores need --reference")
    report = metrics.evaluate_run(
        args.generated, args.reference or args.generated, args.prompt, extractor,
        seed=args.seed, scores=args.scores,
        cache_dir=dirs["features"] if args.cache else None,
    )
    report_path = dirs["reports"] / "scores.json"
    report.write(report_path)
    row = {
        k: (v if not isinstance(v, metrics.UndefinedScore) else "undefined")
        for k, v in report.to_dict().items()
        if k in metrics.ALL_SCORES and v is not None
    }
    reporting.write_table([row], dirs["reports"] / "scores.csv")
    print(report_path)
    return EXIT_OK


def _parse_sweep(sweep: str) -> tuple[str, list]:
    if "=" not in sweep:
        raise ConfigError("sweep must look like tau=0,5,15 or blocks=none,mid")
    key, _, rest = sweep.partition("=")
    values = [v for v in rest.split(",") if v]
    if not values:
        raise ConfigError("empty sweep")
    if key == "tau":
        return "tau", [int(v) for v in values]
    if key == "blocks":
        bad = [v for v in values if v not in STAGE_PRESETS]
        if bad:
            raise ConfigError(f"unknown block presets {bad}")
        return "blocks", values
    raise ConfigError(f"unknown sweep variable {key!r}")


def cmd_ablate(args) -> int:
    dirs = _out_dirs(args.out)
    key, values = _parse_sweep(args.sweep)
    extractor = get_extractor(args.extractor)
    rt = _build_runtime(args)
    rows = []
    for value in values:
        tau = value if key == "tau" else args.steps
        blocks = value if key == "blocks" else "all"
        label = f"{key}_{value}"
        run_dir = dirs["images"] / label
        run_dir.mkdir(parents=True, exist_ok=True)
        images = []
        for i in range(args.n):
            schedule = MergeSchedule.preset(blocks, tau=tau, total_steps=args.steps)
            cfg = sampler.SamplerConfig(
                mode="ddim", steps=args.steps, guidance_scale=args.guidance,
                eta=0.0, seed=args.seed + i,
            )
            image, manifest, _ = sampler.generate_panorama(
                rt["pano"], args.prompt, schedule, cfg, rt["model"], rt["decoder"],
                rt["noise_schedule"], rt["embedder"],
                orientation=rt["orientation"], tiling_mode=rt["tiling_mode"],
                backbone_info=rt["backbone_info"],
            )
            codec.write_image(image, run_dir / f"s{args.seed + i}.png")
            images.append(image)
        px = min(images[0].shape[:2])
        row = {
            key: value,
            "mclip": metrics.mean_clip_score(
                images, args.prompt, extractor, rng_seed=args.seed, view_px=px
            ),
        }
        for score_name, fn in (
            ("intra_lpips", metrics.intra_lpips),
            ("intra_style", metrics.intra_style_loss),
        ):
            vals = [fn(im, extractor, px) for im in images]
            row[score_name] = (
                "undefined"
                if any(isinstance(v, metrics.UndefinedScore) for v in vals)
                else float(np.mean(vals))
            )
        if args.reference:
            _, ref_images = metrics.load_image_dir(args.reference)
            rng = np.random.default_rng(args.seed)
            gen_feats = np.stack(
                [extractor.embed_image(metrics.random_view_crop(im, px, rng))
                 for im in images]
            )
            ref_feats = np.stack([extractor.embed_image(im) for im in ref_images])
            row["fid"] = metrics.fid(gen_feats, ref_feats)
            subset = min(len(gen_feats), len(ref_feats))
            row["kid"] = metrics.kid(gen_feats, ref_feats, subset_size=subset,
                                     seed=args.seed)
            row["mgiqa"] = metrics.mean_giqa(
                gen_feats, ref_feats, k_neighbors=min(3, len(ref_feats) - 1)
            )
        rows.append(row)
    table_path = dirs["reports"] / f"ablate_{key}.csv"
    reporting.write_table(rows, table_path)
    numeric_scores = {
        name: [r[name] for r in rows]
        for name in rows[0]
        if name != key and all(isinstance(r[name], float) for r in rows)
    }
    reporting.plot_sweep(
        values, numeric_scores, key, dirs["reports"] / f"ablate_{key}.png",
        title=f"sweep over {key}",
    )
    print(table_path)
    return EXIT_OK


def cmd_bench(args) -> int:
    dirs = _out_dirs(args.out)
    rt = _build_runtime(args)
    pano = rt["pano"]
    L = pano.view_size
    n = pano.latent_scale
    if args.widths:
        widths_px = [int(v) for v in args.widths.split(",") if v]
    else:
        widths_px = [L * n, 2 * L * n, 4 * L * n, 8 * L * n]
    if not widths_px:
        raise ConfigError("empty width list")
    latent_widths = []
    for w in widths_px:
        if w % n:
            raise ConfigError(f"width {w} not divisible by latent scale {n}")
        lw = w // n
        if args.strict_tiling and (lw - L) % pano.stride:
            raise TilingError(
                f"width {w} is not stride-divisible ({pano.stride}) in strict mode"
            )
        latent_widths.append(lw)
    context = rt["embedder"].null_embedding()
    rows = sampler.runtime_profile(
        rt["model"], context, rt["noise_schedule"], L, pano.stride,
        pano.latent_channels, latent_widths, repeats=args.repeats,
    )
    for row in rows:
        row["attn_flops"] = sampler.attention_matmul_flops(
            L * row["width"], rt["model"].config.base_channels
        )
    table_path = dirs["reports"] / "bench.csv"
    reporting.write_table(rows, table_path)
    reporting.plot_runtime(rows, dirs["reports"] / "bench.png")
    exponents = {}
    if len(latent_widths) >= 2:
        for mode in ("direct-long", "joint-tau0", "joint-tauT"):
            pts = [(r["width"], r["seconds"]) for r in rows if r["mode"] == mode]
            exponents[mode] = sampler.fit_scaling_exponent(
                [p[0] for p in pts], [p[1] for p in pts]
            )
        flops = [r["attn_flops"] for r in rows if r["mode"] == "direct-long"]
        exponents["direct-long-attn-flops"] = sampler.fit_scaling_exponent(
            latent_widths, flops
        )
        (dirs["reports"] / "bench_exponents.json").write_text(
            json.dumps(exponents, indent=2) + "\n"
        )
    print(table_path)
    for mode, exp in exponents.items():
        print(f"{mode}: exponent {exp:.3f}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}

_CONFIG_ERRORS = (
    ConfigError,
    TilingError,
    ExtractorNotFound,
    codec.ManifestError,
)


def main(argv=None) -> int:
    try:
        args = parse_args(argv if argv is not None else sys.argv[1:])
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs:
        torch.set_num_threads(max(1, args.jobs))
    try:
        return COMMANDS[args.command](args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # compute failure
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
