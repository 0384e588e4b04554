"""Reverse-process drivers: noise schedule, DDIM, classifier-free guidance,
the joint denoising loop with end-of-step overlap averaging, and few-step
consistency sampling.

Conventions: alpha is the signal coefficient and sigma the noise coefficient
of the forward kernel x_t = alpha_t * x_0 + sigma_t * eps, with
alpha^2 + sigma^2 = 1 on the default (variance-preserving) schedules.
End-of-step fusion averages the per-view updated latents, not the raw noise
predictions; with eta=0 and shared coefficients the two are affine-equivalent.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import codec
from .backbone import ToyDenoiser, ToyDenoiserConfig, make_toy_model, predict_eps
from .conditioning import PromptEmbedding, ToyTextEmbedder
from .mad import MergeSchedule
from .tiling import PanoramaSpec, ViewLayout, ViewStack, merge, plan_views, split

__version__ = "0.1.0"


class SamplerError(RuntimeError):
    pass


# ------------------------------------------------------------- noise schedule

@dataclass
class NoiseSchedule:
    """Signal/noise coefficient tables indexed by timestep 0..T."""

    alphas: torch.Tensor
    sigmas: torch.Tensor
    derivation: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a, s = self.alphas, self.sigmas
        if a.shape != s.shape or a.dim() != 1:
            raise SamplerError("alpha/sigma tables must be 1-D and equal length")
        if not torch.all(a[1:] <= a[:-1] + 1e-12):
            raise SamplerError("alpha must be non-increasing in t")
        if not torch.all(s[1:] >= s[:-1] - 1e-12):
            raise SamplerError("sigma must be non-decreasing in t")

    @property
    def total_timesteps(self) -> int:
        return len(self.alphas) - 1

    def coeffs(self, t: int) -> tuple[float, float]:
        return float(self.alphas[t]), float(self.sigmas[t])

    @classmethod
    def from_betas(cls, betas: torch.Tensor, derivation: str, meta: dict) -> "NoiseSchedule":
        alpha_bar = torch.cumprod(1.0 - betas.double(), dim=0)
        alphas = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar.sqrt()])
        sigmas = (1.0 - alphas**2).clamp_min(0.0).sqrt()
        return cls(alphas=alphas.float(), sigmas=sigmas.float(),
                   derivation=derivation, meta=meta)

    @classmethod
    def linear_beta(cls, total_timesteps: int, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> "NoiseSchedule":
        betas = torch.linspace(beta_start, beta_end, total_timesteps)
        return cls.from_betas(betas, "linear-beta", {
            "total_timesteps": total_timesteps,
            "beta_start": beta_start, "beta_end": beta_end,
        })

    @classmethod
    def scaled_linear(cls, total_timesteps: int = 1000, beta_start: float = 0.00085,
                      beta_end: float = 0.012) -> "NoiseSchedule":
        betas = torch.linspace(beta_start**0.5, beta_end**0.5, total_timesteps) ** 2
        return cls.from_betas(betas, "scaled-linear", {
            "total_timesteps": total_timesteps,
            "beta_start": beta_start, "beta_end": beta_end,
        })

    @classmethod
    def default_toy(cls, total_timesteps: int = 100) -> "NoiseSchedule":
        # beta range chosen so alpha at t=T is ~0 despite the short table
        sched = cls.linear_beta(total_timesteps, 1e-4, 0.2)
        sched.derivation = "toy-linear-beta"
        sched.meta["beta_end"] = 0.2
        return sched

    def to_dict(self) -> dict:
        if self.derivation == "custom":
            return {"derivation": "custom",
                    "alphas": self.alphas.tolist(), "sigmas": self.sigmas.tolist()}
        return {"derivation": self.derivation, **self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        kind = d["derivation"]
        if kind == "custom":
            return cls(alphas=torch.tensor(d["alphas"]), sigmas=torch.tensor(d["sigmas"]))
        if kind == "linear-beta":
            return cls.linear_beta(d["total_timesteps"], d["beta_start"], d["beta_end"])
        if kind == "toy-linear-beta":
            return cls.default_toy(d["total_timesteps"])
        if kind == "scaled-linear":
            return cls.scaled_linear(d["total_timesteps"], d["beta_start"], d["beta_end"])
        raise SamplerError(f"unknown schedule derivation {kind!r}")


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "ddim"  # or "consistency"
    steps: int = 50
    guidance_scale: float = 7.5
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("ddim", "consistency"):
            raise SamplerError(f"unknown sampler mode {self.mode!r}")
        if self.steps < 1:
            raise SamplerError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise SamplerError("eta must be in [0, 1]")
        if self.guidance_scale < 0:
            raise SamplerError("guidance scale must be >= 0")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "steps": self.steps,
                "guidance_scale": self.guidance_scale,
                "eta": self.eta, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)


@dataclass(frozen=True)
class ConsistencyParam:
    """Skip/output scalings of a consistency model, with the boundary
    condition c_skip(t_b) = 1, c_out(t_b) = 0."""

    c_skip: Callable[[float], float]
    c_out: Callable[[float], float]
    boundary_t: float = 0.0

    def __post_init__(self):
        if abs(self.c_skip(self.boundary_t) - 1.0) > 1e-12:
            raise SamplerError("c_skip must equal 1 at the boundary timestep")
        if abs(self.c_out(self.boundary_t)) > 1e-12:
            raise SamplerError("c_out must vanish at the boundary timestep")

    @classmethod
    def default(cls, sigma_data: float = 0.5, boundary_t: float = 0.0
                ) -> "ConsistencyParam":
        def c_skip(t):
            return sigma_data**2 / ((t - boundary_t) ** 2 + sigma_data**2)

        def c_out(t):
            return sigma_data * (t - boundary_t) / (sigma_data**2 + t**2) ** 0.5

        return cls(c_skip=c_skip, c_out=c_out, boundary_t=boundary_t)


# ------------------------------------------------------------------ stepping

def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, s: float
                ) -> torch.Tensor:
    """Guided prediction: eps_u + s * (eps_c - eps_u)."""
    if eps_uncond.shape != eps_cond.shape:
        raise SamplerError("guidance inputs must share a shape")
    return eps_uncond + s * (eps_cond - eps_uncond)


_ALPHA_FLOOR = 1e-8


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    alpha_t: float,
    sigma_t: float,
    alpha_prev: float,
    sigma_prev: float,
    eta: float = 0.0,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One implicit-sampler update from (alpha_t, sigma_t) to the target pair.

    eta = 0 is fully deterministic. alpha_t is floored to avoid dividing by
    zero at the pure-noise end of the schedule.
    """
    a_t = max(alpha_t, _ALPHA_FLOOR)
    x0_pred = (x_t - sigma_t * eps_hat) / a_t
    if eta <= 0.0:
        return alpha_prev * x0_pred + sigma_prev * eps_hat
    if noise is None:
        raise SamplerError("eta > 0 requires a noise tensor")
    a_prev = max(alpha_prev, _ALPHA_FLOOR)
    if sigma_t <= 0.0:
        return alpha_prev * x0_pred + sigma_prev * eps_hat
    ddim_sigma = (
        eta * (sigma_prev / sigma_t) * (1.0 - a_t**2 / a_prev**2) ** 0.5
    )
    dir_coef = max(sigma_prev**2 - ddim_sigma**2, 0.0) ** 0.5
    return alpha_prev * x0_pred + dir_coef * eps_hat + ddim_sigma * noise


def consistency_step(
    x_t: torch.Tensor, t: float, f_output: torch.Tensor, params: ConsistencyParam
) -> torch.Tensor:
    """x0 estimate: c_skip(t) * x_t + c_out(t) * F(x_t, t)."""
    return params.c_skip(t) * x_t + params.c_out(t) * f_output


def timestep_ladder(total_timesteps: int, steps: int) -> list[int]:
    """Evenly spaced descending ladder T = t_0 > ... > t_steps = 0."""
    if not 1 <= steps <= total_timesteps:
        raise SamplerError(f"steps must be in [1, {total_timesteps}], got {steps}")
    pts = np.linspace(total_timesteps, 0, steps + 1)
    ladder = [int(round(p)) for p in pts]
    if len(set(ladder)) != len(ladder):
        raise SamplerError("timestep ladder collapsed; reduce steps")
    return ladder


# ------------------------------------------------------------ the joint loop

def _predict_guided(
    model, stack: ViewStack, t: int, context: PromptEmbedding,
    null_context: PromptEmbedding, merge_schedule: MergeSchedule,
    step_index: int, guidance_scale: float, token_cap: int | None,
) -> list[torch.Tensor]:
    eps_cond = predict_eps(model, stack, t, context, merge_schedule, step_index,
                           token_cap=token_cap)
    if guidance_scale == 1.0:
        return eps_cond.views
    eps_uncond = predict_eps(model, stack, t, null_context, merge_schedule,
                             step_index, token_cap=token_cap)
    return [
        cfg_combine(u, c, guidance_scale)
        for u, c in zip(eps_uncond.views, eps_cond.views)
    ]


def joint_denoise_step(
    x_t: torch.Tensor,
    step_index: int,
    t: int,
    t_prev: int,
    layout: ViewLayout,
    merge_schedule: MergeSchedule,
    sampler_cfg: SamplerConfig,
    model,
    context: PromptEmbedding,
    null_context: PromptEmbedding,
    noise_schedule: NoiseSchedule,
    gen: Optional[torch.Generator] = None,
    token_cap: int | None = None,
) -> torch.Tensor:
    """Split, predict per-view noise with merge routing and guidance, update
    each view, and fuse by overlap averaging."""
    stack = split(x_t, layout)
    eps_views = _predict_guided(
        model, stack, t, context, null_context, merge_schedule, step_index,
        sampler_cfg.guidance_scale, token_cap,
    )
    a_t, s_t = noise_schedule.coeffs(t)
    a_p, s_p = noise_schedule.coeffs(t_prev)
    noise_views = None
    if sampler_cfg.eta > 0.0:
        if gen is None:
            raise SamplerError("eta > 0 requires a generator")
        canvas_noise = torch.randn(x_t.shape, generator=gen)
        noise_views = split(canvas_noise, layout).views
    updated = []
    for i, (view, eps) in enumerate(zip(stack.views, eps_views)):
        noise = noise_views[i] if noise_views is not None else None
        updated.append(
            ddim_step(view, eps, a_t, s_t, a_p, s_p, sampler_cfg.eta, noise)
        )
    return merge(ViewStack(views=updated, layout=layout))


def multistep_consistency_sample(
    x_init: torch.Tensor,
    layout: ViewLayout,
    merge_schedule: MergeSchedule,
    sampler_cfg: SamplerConfig,
    model,
    context: PromptEmbedding,
    null_context: PromptEmbedding,
    noise_schedule: NoiseSchedule,
    params: ConsistencyParam,
    gen: torch.Generator,
    token_cap: int | None = None,
    on_step: Optional[Callable[[int, torch.Tensor], None]] = None,
) -> torch.Tensor:
    """Alternate x0 estimation and forward re-noising down a timestep ladder.

    steps=1 is a single model evaluation from x_T. Re-noising always draws
    canvas-wide noise so overlapping views stay consistent.
    """
    steps = sampler_cfg.steps
    tt = noise_schedule.total_timesteps
    if not 1 <= steps <= tt:
        raise SamplerError(f"consistency steps must be in [1, {tt}]")
    rungs = [int(round(v)) for v in np.linspace(tt, tt / steps, steps)]
    x = x_init
    x0_est = x
    for i, t in enumerate(rungs):
        if i > 0:
            a, s = noise_schedule.coeffs(t)
            x = a * x0_est + s * torch.randn(x0_est.shape, generator=gen)
        stack = split(x, layout)
        eps_views = _predict_guided(
            model, stack, t, context, null_context, merge_schedule, i,
            sampler_cfg.guidance_scale, token_cap,
        )
        a_t, s_t = noise_schedule.coeffs(t)
        a_safe = max(a_t, _ALPHA_FLOOR)
        x0_views = []
        for view, eps in zip(stack.views, eps_views):
            f_out = (view - s_t * eps) / a_safe
            x0_views.append(consistency_step(view, float(t), f_out, params))
        x0_est = merge(ViewStack(views=x0_views, layout=layout))
        if on_step is not None:
            on_step(i, x0_est)
    return x0_est


# -------------------------------------------------------------- generation

def generate_panorama(
    pano: PanoramaSpec,
    prompt: str,
    merge_schedule: MergeSchedule,
    sampler_cfg: SamplerConfig,
    model,
    decoder_spec: codec.DecoderSpec,
    noise_schedule: NoiseSchedule,
    embedder,
    orientation: str = "horizontal",
    tiling_mode: str = "clamp",
    backbone_info: Optional[dict] = None,
    consistency_params: Optional[ConsistencyParam] = None,
    token_cap: int | None = None,
    dump_latents_dir: str | Path | None = None,
) -> tuple[np.ndarray, codec.RunManifest, torch.Tensor]:
    """Full panorama generation: seed noise over the whole canvas, run the
    joint reverse process, decode, and assemble a replayable manifest."""
    if merge_schedule.total_steps != sampler_cfg.steps:
        raise SamplerError(
            f"merge schedule covers {merge_schedule.total_steps} steps but the "
            f"sampler runs {sampler_cfg.steps}"
        )
    layout = plan_views(pano, orientation, mode=tiling_mode)
    context = embedder.embed(prompt)
    null_context = embedder.null_embedding()
    gen = torch.Generator().manual_seed(sampler_cfg.seed)
    x = torch.randn(
        (pano.latent_channels, *pano.latent_shape), generator=gen
    )
    timings: list[float] = []
    dump_dir = Path(dump_latents_dir) if dump_latents_dir else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    if sampler_cfg.mode == "consistency":
        params = consistency_params or ConsistencyParam.default()

        def on_step(i, latent):
            if dump_dir:
                codec.write_latent(latent, i, dump_dir / f"step_{i:04d}.bin")

        t0 = time.perf_counter()
        x = multistep_consistency_sample(
            x, layout, merge_schedule, sampler_cfg, model, context,
            null_context, noise_schedule, params, gen, token_cap, on_step,
        )
        timings.append(time.perf_counter() - t0)
    else:
        ladder = timestep_ladder(noise_schedule.total_timesteps, sampler_cfg.steps)
        for i in range(sampler_cfg.steps):
            t0 = time.perf_counter()
            try:
                x = joint_denoise_step(
                    x, i, ladder[i], ladder[i + 1], layout, merge_schedule,
                    sampler_cfg, model, context, null_context, noise_schedule,
                    gen, token_cap,
                )
            except Exception as exc:
                raise SamplerError(f"denoise step {i} failed: {exc}") from exc
            timings.append(time.perf_counter() - t0)
            if dump_dir:
                codec.write_latent(x, i, dump_dir / f"step_{i:04d}.bin")

    image = codec.decode(x, decoder_spec)
    manifest = codec.RunManifest(
        panorama={
            "image_height": pano.image_height,
            "image_width": pano.image_width,
            "latent_scale": pano.latent_scale,
            "latent_channels": pano.latent_channels,
            "view_size": pano.view_size,
            "stride": pano.stride,
            "tiling_mode": tiling_mode,
        },
        merge_schedule=merge_schedule.to_dict(),
        sampler=sampler_cfg.to_dict(),
        backbone=backbone_info or {"id": "unknown"},
        decoder={
            "kind": decoder_spec.kind,
            "latent_scale": decoder_spec.latent_scale,
            "latent_channels": decoder_spec.latent_channels,
            "output_channels": decoder_spec.output_channels,
        },
        noise_schedule=noise_schedule.to_dict(),
        seed=sampler_cfg.seed,
        version=__version__,
        fusion_mode="average-updated-latents",
        clamp_triggered=layout.clamped,
        step_timings=timings,
        output_hashes={"image_sha256": codec.image_hash(image)},
        prompt=prompt,
        orientation=orientation,
        layout=layout.to_dict(),
    )
    return image, manifest, x


def replay_run(manifest: codec.RunManifest) -> tuple[np.ndarray, codec.RunManifest]:
    """Re-run a manifest; on one platform the image is byte-identical."""
    p = manifest.panorama
    pano = PanoramaSpec(
        image_height=p["image_height"], image_width=p["image_width"],
        latent_scale=p["latent_scale"], latent_channels=p["latent_channels"],
        view_size=p["view_size"], stride=p["stride"],
    )
    merge_schedule = MergeSchedule.from_dict(manifest.merge_schedule)
    sampler_cfg = SamplerConfig.from_dict(manifest.sampler)
    noise_schedule = NoiseSchedule.from_dict(manifest.noise_schedule)
    b = manifest.backbone
    if b.get("id") != "toy":
        raise SamplerError(f"cannot replay backbone {b.get('id')!r}")
    config = ToyDenoiserConfig.from_dict(b["config"])
    if b.get("params_path"):
        model = ToyDenoiser(config)
        model.load_state_dict(codec.load_params(b["params_path"]))
    else:
        model = make_toy_model(config, b.get("init_seed", 0))
    d = manifest.decoder
    decoder_spec = codec.DecoderSpec(
        kind=d["kind"], latent_scale=d["latent_scale"],
        latent_channels=d["latent_channels"], output_channels=d["output_channels"],
    )
    embedder = ToyTextEmbedder(dim=config.context_dim)
    image, new_manifest, _ = generate_panorama(
        pano, manifest.prompt, merge_schedule, sampler_cfg, model, decoder_spec,
        noise_schedule, embedder, orientation=manifest.orientation,
        tiling_mode=p.get("tiling_mode", "clamp"), backbone_info=b,
    )
    return image, new_manifest


# ------------------------------------------------------------ runtime study

def attention_matmul_flops(tokens: int, dim: int) -> int:
    """Quadratic kernel cost of one attention layer: score and apply matmuls."""
    return 4 * tokens * tokens * dim


def fit_scaling_exponent(widths, costs) -> float:
    """Least-squares slope of log(cost) against log(width)."""
    lw = np.log(np.asarray(widths, dtype=np.float64))
    lc = np.log(np.asarray(costs, dtype=np.float64))
    slope, _ = np.polyfit(lw, lc, 1)
    return float(slope)


def runtime_profile(
    model,
    context: PromptEmbedding,
    noise_schedule: NoiseSchedule,
    view_size: int,
    stride: int,
    latent_channels: int,
    widths: list[int],
    repeats: int = 3,
) -> list[dict]:
    """Wall-time of one denoise step per (latent width, mode).

    Modes: direct evaluation of the whole long canvas, joint diffusion with
    merging off, and joint diffusion with merging always on.
    """
    null_ctx = context
    rows = []
    t = noise_schedule.total_timesteps // 2
    t_prev = max(t - 1, 0)
    cfg = SamplerConfig(mode="ddim", steps=1, guidance_scale=1.0, eta=0.0, seed=0)
    for width in widths:
        gen = torch.Generator().manual_seed(0)
        x = torch.randn((latent_channels, view_size, width), generator=gen)
        spec = PanoramaSpec(
            image_height=view_size, image_width=width, latent_scale=1,
            latent_channels=latent_channels, view_size=view_size, stride=stride,
        )
        layout = plan_views(spec, "horizontal")
        a_t, s_t = noise_schedule.coeffs(t)
        a_p, s_p = noise_schedule.coeffs(t_prev)

        def direct_step():
            eps = predict_eps(model, x, t, context)
            ddim_step(x, eps, a_t, s_t, a_p, s_p)

        def joint_step(schedule):
            joint_denoise_step(
                x, 0, t, t_prev, layout, schedule, cfg, model, context,
                null_ctx, noise_schedule,
            )

        modes = {
            "direct-long": direct_step,
            "joint-tau0": lambda: joint_step(MergeSchedule.never(1)),
            "joint-tauT": lambda: joint_step(MergeSchedule(tau=1, total_steps=1)),
        }
        for mode, fn in modes.items():
            fn()  # warm up
            best = min(_timed(fn) for _ in range(repeats))
            rows.append({"width": width, "mode": mode, "seconds": best})
    return rows


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0
