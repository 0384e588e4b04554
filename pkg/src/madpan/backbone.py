"""Noise-prediction backbones.

The toy denoiser is a 2-level U-Net (GroupNorm, SiLU, sinusoidal timestep
embedding, one self- plus one cross-attention layer per level and at the
bottleneck) small enough to train on a laptop while still exposing the
down/mid/up attention taxonomy the merge schedule targets.

Attention carries no positional encoding, so any consistent token flattening
of the merged canvas is equivalent and permutation equivariance holds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import mad
from .conditioning import PromptEmbedding
from .tiling import ViewLayout, ViewStack


class BackboneError(RuntimeError):
    pass


class TrainingDiverged(BackboneError):
    pass


@dataclass(frozen=True)
class AttnBlockDescriptor:
    layer_id: int
    stage: str  # down | mid | up
    kind: str  # self | cross
    feature_channels: int
    spatial_scale: int


def validate_descriptors(descriptors: list[AttnBlockDescriptor]) -> None:
    ids = [d.layer_id for d in descriptors]
    if len(set(ids)) != len(ids):
        raise BackboneError(f"duplicate attention layer ids: {ids}")
    for d in descriptors:
        if d.stage not in mad.STAGES:
            raise BackboneError(f"layer {d.layer_id} has un-taggable stage {d.stage!r}")
        if d.kind not in ("self", "cross"):
            raise BackboneError(f"layer {d.layer_id} has unknown kind {d.kind!r}")
        if d.feature_channels <= 0:
            raise BackboneError(f"layer {d.layer_id} has invalid channel count")


def enumerate_attention_layers(backbone) -> list[AttnBlockDescriptor]:
    """Complete, ordered descriptor list for every attention layer."""
    descriptors = list(backbone.attention_layers())
    validate_descriptors(descriptors)
    return descriptors


class BackboneAdapter(Protocol):
    """Contract for plugging an external pretrained U-Net into the pipeline.

    attention_layers() enumerates the attention layers; predict_noise runs
    the block graph over per-view features and, at each attention layer,
    calls `callback(layer_id, views, context, attend)` where `attend` is the
    layer's own token-level attention callable; the callback returns the
    replacement per-view features. Weight loading is the adapter's concern.
    """

    def attention_layers(self) -> list[AttnBlockDescriptor]: ...

    def predict_noise(self, views, t, context, callback): ...


# ---------------------------------------------------------------- layers

def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of (possibly batched) timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.dtype if t.is_floating_point() else torch.float32)
    args = t.float()[..., None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(freqs.dtype)


def attention_core(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, chunk: int | None = None
) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v, optionally streaming over key chunks.

    The chunked path is a two-pass computation (row max, then normalized
    accumulation) so memory stays linear in the chunk size; it agrees with
    the dense path within float reassociation error.
    """
    scale = q.shape[-1] ** -0.5
    n_keys = k.shape[-2]
    if chunk is None or n_keys <= chunk:
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        return attn @ v
    row_max = None
    for s in range(0, n_keys, chunk):
        scores = q @ k[..., s : s + chunk, :].transpose(-2, -1) * scale
        cmax = scores.max(dim=-1).values
        row_max = cmax if row_max is None else torch.maximum(row_max, cmax)
    denom = torch.zeros_like(row_max)
    num = torch.zeros(*q.shape[:-1], v.shape[-1], dtype=q.dtype)
    for s in range(0, n_keys, chunk):
        scores = q @ k[..., s : s + chunk, :].transpose(-2, -1) * scale
        w = torch.exp(scores - row_max[..., None])
        denom = denom + w.sum(dim=-1)
        num = num + w @ v[..., s : s + chunk, :]
    return num / denom[..., None]


class AttentionLayer(nn.Module):
    """Pre-norm single-head attention over flattened spatial tokens."""

    def __init__(self, channels: int, kind: str, context_dim: int | None = None,
                 chunk: int | None = None):
        super().__init__()
        self.kind = kind
        self.chunk = chunk
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        kv_dim = context_dim if kind == "cross" else channels
        self.to_k = nn.Linear(kv_dim, channels, bias=False)
        self.to_v = nn.Linear(kv_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, tokens: torch.Tensor, context: Optional[PromptEmbedding] = None
                ) -> torch.Tensor:
        if torch.isnan(tokens).any():
            raise BackboneError("NaN in attention input")
        h = self.norm(tokens)
        q = self.to_q(h)
        if self.kind == "cross":
            if context is None:
                raise BackboneError("cross-attention requires a prompt embedding")
            ctx = context.data.to(tokens.dtype)
            k = self.to_k(ctx)
            v = self.to_v(ctx)
            if tokens.dim() > 2:
                shape = tokens.shape[:-2]
                k = k.expand(*shape, *k.shape)
                v = v.expand(*shape, *v.shape)
        else:
            k = self.to_k(h)
            v = self.to_v(h)
        out = attention_core(q, k, v, chunk=self.chunk)
        return tokens + self.to_out(out)


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int):
        super().__init__()
        groups = math.gcd(8, in_channels)
        self.norm1 = nn.GroupNorm(groups, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_channels)
        self.norm2 = nn.GroupNorm(math.gcd(8, out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1)
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[..., None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _LevelAttn(nn.Module):
    def __init__(self, channels, context_dim, chunk):
        super().__init__()
        self.self_attn = AttentionLayer(channels, "self", chunk=chunk)
        self.cross_attn = AttentionLayer(channels, "cross", context_dim, chunk=chunk)


# ---------------------------------------------------------------- toy U-Net

@dataclass(frozen=True)
class ToyDenoiserConfig:
    base_channels: int = 32
    levels: int = 2
    timestep_embed_dim: int = 64
    context_dim: int = 32
    latent_channels: int = 4
    attn_chunk: int | None = None

    def __post_init__(self):
        if min(self.base_channels, self.levels, self.timestep_embed_dim,
               self.context_dim, self.latent_channels) < 1:
            raise BackboneError("all toy-denoiser dims must be positive")

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "levels": self.levels,
            "timestep_embed_dim": self.timestep_embed_dim,
            "context_dim": self.context_dim,
            "latent_channels": self.latent_channels,
            "attn_chunk": self.attn_chunk,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDenoiserConfig":
        return cls(**d)


class ToyDenoiser(nn.Module):
    """Epsilon-predicting U-Net with MAD-routable attention layers."""

    def __init__(self, config: ToyDenoiserConfig = ToyDenoiserConfig()):
        super().__init__()
        self.config = config
        cfg = config
        chs = [cfg.base_channels * (2 ** lvl) for lvl in range(cfg.levels)]
        temb = cfg.timestep_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb)
        )
        self.conv_in = nn.Conv2d(cfg.latent_channels, chs[0], 3, padding=1)
        self.down_res = nn.ModuleList(
            [ResBlock(chs[l], chs[l], temb) for l in range(cfg.levels)]
        )
        self.down_attn = nn.ModuleList(
            [_LevelAttn(chs[l], cfg.context_dim, cfg.attn_chunk) for l in range(cfg.levels)]
        )
        self.downsamples = nn.ModuleList(
            [nn.Conv2d(chs[l], chs[l + 1], 3, stride=2, padding=1)
             for l in range(cfg.levels - 1)]
        )
        top = chs[-1]
        self.mid_res1 = ResBlock(top, top, temb)
        self.mid_attn = _LevelAttn(top, cfg.context_dim, cfg.attn_chunk)
        self.mid_res2 = ResBlock(top, top, temb)
        self.up_res = nn.ModuleList(
            [ResBlock(chs[l] * 2, chs[l], temb) for l in range(cfg.levels)]
        )
        self.up_attn = nn.ModuleList(
            [_LevelAttn(chs[l], cfg.context_dim, cfg.attn_chunk) for l in range(cfg.levels)]
        )
        self.upsamples = nn.ModuleList(
            [nn.Conv2d(chs[l + 1], chs[l], 3, padding=1) for l in range(cfg.levels - 1)]
        )
        self.out_norm = nn.GroupNorm(math.gcd(8, chs[0]), chs[0])
        self.conv_out = nn.Conv2d(chs[0], cfg.latent_channels, 3, padding=1)
        self._descriptors = self._build_descriptors()

    def _build_descriptors(self) -> list[AttnBlockDescriptor]:
        cfg = self.config
        chs = [cfg.base_channels * (2 ** lvl) for lvl in range(cfg.levels)]
        descriptors: list[AttnBlockDescriptor] = []
        next_id = 0

        def add(stage, kind, channels, scale):
            nonlocal next_id
            descriptors.append(
                AttnBlockDescriptor(next_id, stage, kind, channels, scale)
            )
            next_id += 1

        for lvl in range(cfg.levels):
            add("down", "self", chs[lvl], 2 ** lvl)
            add("down", "cross", chs[lvl], 2 ** lvl)
        add("mid", "self", chs[-1], 2 ** (cfg.levels - 1))
        add("mid", "cross", chs[-1], 2 ** (cfg.levels - 1))
        for lvl in reversed(range(cfg.levels)):
            add("up", "self", chs[lvl], 2 ** lvl)
            add("up", "cross", chs[lvl], 2 ** lvl)
        return descriptors

    def attention_layers(self) -> list[AttnBlockDescriptor]:
        return list(self._descriptors)

    def _attn_modules(self):
        mods = []
        for lvl in range(self.config.levels):
            attn = self.down_attn[lvl]
            mods += [attn.self_attn, attn.cross_attn]
        mods += [self.mid_attn.self_attn, self.mid_attn.cross_attn]
        for lvl in reversed(range(self.config.levels)):
            attn = self.up_attn[lvl]
            mods += [attn.self_attn, attn.cross_attn]
        return mods

    def _run(self, xs: list[torch.Tensor], temb: torch.Tensor,
             context: Optional[PromptEmbedding], attn_apply) -> list[torch.Tensor]:
        """Shared block traversal over a list of (B, C, H, W) tensors.

        Inference passes one (1, C, L, L) tensor per view so per-view kernels
        are bit-identical to single-view evaluation; training passes a single
        batched tensor.
        """
        cfg = self.config
        attn_mods = self._attn_modules()
        descs = self._descriptors
        cursor = 0

        def attend_pair(xs):
            nonlocal cursor
            for _ in range(2):
                xs = attn_apply(descs[cursor], attn_mods[cursor], xs, context)
                cursor += 1
            return xs

        xs = [self.conv_in(x) for x in xs]
        skips = []
        for lvl in range(cfg.levels):
            xs = [self.down_res[lvl](x, temb) for x in xs]
            xs = attend_pair(xs)
            skips.append(xs)
            if lvl < cfg.levels - 1:
                xs = [self.downsamples[lvl](x) for x in xs]
        xs = [self.mid_res1(x, temb) for x in xs]
        xs = attend_pair(xs)
        xs = [self.mid_res2(x, temb) for x in xs]
        for lvl in reversed(range(cfg.levels)):
            xs = [
                self.up_res[lvl](torch.cat([x, s], dim=1), temb)
                for x, s in zip(xs, skips[lvl])
            ]
            xs = attend_pair(xs)
            if lvl > 0:
                xs = [
                    self.upsamples[lvl - 1](
                        F.interpolate(x, scale_factor=2, mode="nearest")
                    )
                    for x in xs
                ]
        return [self.conv_out(F.silu(self.out_norm(x))) for x in xs]

    def _temb(self, t, batch: int, dtype) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.tensor([t] * batch)
        emb = sinusoidal_embedding(t, self.config.timestep_embed_dim).to(dtype)
        return self.time_mlp(emb)

    def forward_batch(self, x: torch.Tensor, t, context: PromptEmbedding) -> torch.Tensor:
        """Batched evaluation (training path): x is (B, C, H, W)."""
        temb = self._temb(t, x.shape[0], x.dtype)

        def attn_apply(desc, layer, xs, ctx):
            (h_x,) = xs
            b, c, hh, ww = h_x.shape
            tokens = h_x.permute(0, 2, 3, 1).reshape(b, hh * ww, c)
            tokens = layer(tokens, ctx if desc.kind == "cross" else None)
            return [tokens.reshape(b, hh, ww, c).permute(0, 3, 1, 2)]

        (out,) = self._run([x], temb, context, attn_apply)
        return out


def _view_router(model: ToyDenoiser, base_layout: Optional[ViewLayout],
                 schedule: Optional[mad.MergeSchedule], step_index: int,
                 token_cap: int | None):
    """Build the attention dispatcher used during (joint) inference."""

    def attn_apply(desc, layer, xs, context):
        ctx = context if desc.kind == "cross" else None
        attend = lambda tokens, c: layer(tokens, c)
        views = [x[0] for x in xs]
        if base_layout is None or schedule is None:
            out_views = []
            for view in views:
                c, hh, ww = view.shape
                tokens = view.permute(1, 2, 0).reshape(hh * ww, c)
                tokens = attend(tokens, ctx)
                out_views.append(tokens.reshape(hh, ww, c).permute(2, 0, 1))
        else:
            routed = mad.route_attention(
                schedule, step_index, desc,
                ViewStack(views, base_layout.scaled(desc.spatial_scale)),
                attend, ctx, token_cap=token_cap,
            )
            out_views = routed.views
        return [v.unsqueeze(0) for v in out_views]

    return attn_apply


def predict_eps(
    model: ToyDenoiser,
    x,
    t,
    context: PromptEmbedding,
    schedule: Optional[mad.MergeSchedule] = None,
    step_index: int = 0,
    token_cap: int | None = None,
):
    """Run the noise predictor over a grid or a view stack.

    Conv blocks always run per view; each attention layer is routed through
    the merge schedule (merged canvas vs per view). A bare (C, H, W) tensor
    is evaluated directly as a single view and returned as a tensor.
    """
    if schedule is not None and schedule.layer_overrides:
        known = {d.layer_id for d in model.attention_layers()}
        unknown = set(schedule.layer_overrides) - known
        if unknown:
            raise BackboneError(f"layer_overrides reference unknown ids {sorted(unknown)}")
    with torch.no_grad():
        if torch.is_tensor(x):
            temb = model._temb(t, 1, x.dtype)
            apply = _view_router(model, None, None, step_index, token_cap)
            outs = model._run([x.unsqueeze(0)], temb, context, apply)
            return outs[0][0]
        stack: ViewStack = x
        temb = model._temb(t, 1, stack.views[0].dtype)
        apply = _view_router(model, stack.layout, schedule, step_index, token_cap)
        outs = model._run(
            [v.unsqueeze(0) for v in stack.views], temb, context, apply
        )
        return ViewStack(views=[o[0] for o in outs], layout=stack.layout)


def make_toy_model(config: ToyDenoiserConfig = ToyDenoiserConfig(),
                   init_seed: int = 0) -> ToyDenoiser:
    """Construct a toy denoiser with reproducible parameter initialization."""
    torch.manual_seed(init_seed)
    return ToyDenoiser(config)


# ---------------------------------------------------------------- training

def make_stripe_latents(
    count: int, size: int, channels: int, seed: int,
    orientations: int = 8,
) -> torch.Tensor:
    """Synthetic oriented-texture latents: each sample is a sinusoidal stripe
    pattern with a per-sample orientation, phase, frequency, and channel mix."""
    gen = torch.Generator().manual_seed(seed)
    ys, xs = torch.meshgrid(
        torch.arange(size, dtype=torch.float32),
        torch.arange(size, dtype=torch.float32),
        indexing="ij",
    )
    out = torch.empty(count, channels, size, size)
    for i in range(count):
        k = int(torch.randint(0, orientations, (1,), generator=gen))
        theta = math.pi * k / orientations
        freq = 0.4 + 0.6 * float(torch.rand(1, generator=gen))
        phase = 2 * math.pi * float(torch.rand(1, generator=gen))
        wave = torch.sin(freq * (xs * math.cos(theta) + ys * math.sin(theta)) + phase)
        mix = torch.randn(channels, generator=gen)
        mix = mix / mix.norm().clamp_min(1e-6)
        out[i] = wave[None] * mix[:, None, None] * 1.5
    return out


def train_toy_denoiser(
    model: ToyDenoiser,
    dataset: torch.Tensor,
    schedule,
    steps: int,
    seed: int,
    context: PromptEmbedding,
    lr: float = 2e-3,
    batch_size: int = 8,
) -> dict:
    """Train the epsilon objective; returns the loss history and probe losses.

    The probe loss is the noise-prediction MSE on a fixed seeded batch,
    measured before and after training.
    """
    gen = torch.Generator().manual_seed(seed)
    n = dataset.shape[0]
    t_max = len(schedule.alphas) - 1

    def sample_batch(g):
        idx = torch.randint(0, n, (batch_size,), generator=g)
        x0 = dataset[idx]
        t = torch.randint(1, t_max + 1, (batch_size,), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        a = schedule.alphas[t].view(-1, 1, 1, 1).to(x0.dtype)
        s = schedule.sigmas[t].view(-1, 1, 1, 1).to(x0.dtype)
        return a * x0 + s * eps, t, eps

    probe_gen = torch.Generator().manual_seed(seed + 1)
    probe = sample_batch(probe_gen)

    def probe_loss():
        with torch.no_grad():
            xt, t, eps = probe
            return float(F.mse_loss(model.forward_batch(xt, t, context), eps))

    initial = probe_loss()
    losses: list[float] = []
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for step in range(steps):
        xt, t, eps = sample_batch(gen)
        pred = model.forward_batch(xt, t, context)
        loss = F.mse_loss(pred, eps)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"loss became non-finite at step {step} (lr={lr}, batch={batch_size})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return {"losses": losses, "initial_loss": initial, "final_loss": probe_loss()}
