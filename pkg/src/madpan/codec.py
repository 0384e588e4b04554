"""Latent-to-image decoding, image/tensor file formats, and run manifests.

File formats:
  - images: 8-bit RGB PNG.
  - toy-denoiser parameters: magic "MADTOY1", then per-tensor records
    (uint32 name length, utf-8 name, uint32 rank, uint32 dims, float32 LE data).
  - latent snapshots: magic "MADLAT1", uint32 step index, uint32 rank,
    uint32 dims, float32 LE row-major payload.
  - manifests: JSON with sorted keys; enough to replay a run byte-identically
    on the same platform.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

PARAMS_MAGIC = b"MADTOY1"
LATENT_MAGIC = b"MADLAT1"


class CodecError(RuntimeError):
    pass


class ManifestError(CodecError):
    pass


# ---------------------------------------------------------------- decoding

@dataclass(frozen=True)
class DecoderSpec:
    kind: str = "toy-linear"  # or "external-vae"
    latent_scale: int = 4
    latent_channels: int = 4
    output_channels: int = 3

    def __post_init__(self):
        if self.latent_scale < 1:
            raise CodecError("latent_scale must be >= 1")
        if self.kind not in ("toy-linear", "external-vae"):
            raise CodecError(f"unknown decoder kind {self.kind!r}")


_TOY_DECODER_SEED = 7


def toy_decoder_matrix(spec: DecoderSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Fixed linear map (C, C') and bias used by the toy decoder."""
    gen = torch.Generator().manual_seed(_TOY_DECODER_SEED)
    mat = torch.randn(spec.output_channels, spec.latent_channels, generator=gen)
    mat = mat / (spec.latent_channels ** 0.5)
    bias = torch.full((spec.output_channels,), 0.5)
    return mat, bias


def decode(
    x0: torch.Tensor,
    spec: DecoderSpec,
    matrix: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    adapter=None,
) -> np.ndarray:
    """Decode a latent (C', h, w) into an image array (h*n, w*n, C) in [0, 1].

    toy-linear applies a fixed per-pixel linear map then nearest-neighbor
    upsamples by n; the map is linear so decode errors cannot mask sampling
    bugs. external-vae delegates to the given adapter.
    """
    if spec.kind == "external-vae":
        if adapter is None:
            raise CodecError("external-vae decoding requires an adapter")
        return adapter.decode(x0)
    if x0.shape[0] != spec.latent_channels:
        raise CodecError(
            f"latent has {x0.shape[0]} channels, decoder expects {spec.latent_channels}"
        )
    if matrix is None or bias is None:
        default_mat, default_bias = toy_decoder_matrix(spec)
        matrix = default_mat if matrix is None else matrix
        bias = default_bias if bias is None else bias
    # (C', h, w) -> (C, h, w)
    img = torch.einsum("oc,chw->ohw", matrix, x0.float()) + bias[:, None, None]
    n = spec.latent_scale
    if n > 1:
        img = img.repeat_interleave(n, dim=-2).repeat_interleave(n, dim=-1)
    img = img.clamp(0.0, 1.0)
    return img.permute(1, 2, 0).detach().numpy().astype(np.float32)


# ---------------------------------------------------------------- image I/O

def write_image(image: np.ndarray, path: str | Path) -> None:
    """Write a float [0,1] (H, W, 3) array as an 8-bit RGB PNG."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise CodecError(f"expected (H, W, 3) image, got {image.shape}")
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(Path(path), format="PNG")


def read_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB PNG back to a float32 [0,1] array."""
    try:
        img = Image.open(Path(path))
    except OSError as exc:
        raise CodecError(f"cannot read image {path}: {exc}") from exc
    if img.mode in ("I", "I;16", "I;16B", "F"):
        raise CodecError(f"unsupported bit depth (mode {img.mode}) in {path}")
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def image_hash(image: np.ndarray) -> str:
    """Platform-stable sha256 of the quantized 8-bit pixel data."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    return hashlib.sha256(arr.astype(np.uint8).tobytes()).hexdigest()


# ------------------------------------------------------------ binary tensors

def save_params(params: dict[str, torch.Tensor], path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        for name, tensor in params.items():
            data = tensor.detach().cpu().numpy().astype("<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_params(path: str | Path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as f:
        if f.read(len(PARAMS_MAGIC)) != PARAMS_MAGIC:
            raise CodecError(f"{path} is not a toy-parameter file")
        params: dict[str, torch.Tensor] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
            params[name] = torch.from_numpy(data.copy())
    return params


def write_latent(latent: torch.Tensor, step_index: int, path: str | Path) -> None:
    data = latent.detach().cpu().numpy().astype("<f4")
    with open(path, "wb") as f:
        f.write(LATENT_MAGIC)
        f.write(struct.pack("<I", step_index))
        f.write(struct.pack("<I", data.ndim))
        f.write(struct.pack(f"<{data.ndim}I", *data.shape))
        f.write(data.tobytes())


def read_latent(path: str | Path) -> tuple[torch.Tensor, int]:
    with open(path, "rb") as f:
        if f.read(len(LATENT_MAGIC)) != LATENT_MAGIC:
            raise CodecError(f"{path} is not a latent snapshot")
        (step_index,) = struct.unpack("<I", f.read(4))
        (rank,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
    return torch.from_numpy(data.copy()), step_index


# ---------------------------------------------------------------- manifests

MANIFEST_REQUIRED_KEYS = (
    "panorama",
    "merge_schedule",
    "sampler",
    "backbone",
    "decoder",
    "noise_schedule",
    "seed",
    "version",
    "fusion_mode",
    "clamp_triggered",
    "step_timings",
    "output_hashes",
)


@dataclass
class RunManifest:
    """Config snapshot sufficient to reproduce a run on the same platform."""

    panorama: dict
    merge_schedule: dict
    sampler: dict
    backbone: dict
    decoder: dict
    noise_schedule: dict
    seed: int
    version: str
    fusion_mode: str
    clamp_triggered: bool
    step_timings: list = field(default_factory=list)
    output_hashes: dict = field(default_factory=dict)
    prompt: str = ""
    orientation: str = "horizontal"
    layout: dict | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        missing = [k for k in MANIFEST_REQUIRED_KEYS if k not in d]
        if missing:
            raise ManifestError(f"manifest missing required keys: {missing}")
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def write_manifest(manifest: RunManifest, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n"
    )


def load_manifest(path: str | Path) -> RunManifest:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    return RunManifest.from_dict(d)
