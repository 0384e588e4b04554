"""Evaluation scores over pluggable feature extractors.

Intra-image scores average a perceptual (or Gram-style) distance over all
pairs of non-overlapping square crops of one panorama. Distribution scores
compare single-crop features of the generated images against a square
reference set. I-StyleL, KID, and mGIQA are conventionally tabulated x1000;
reports carry that scaling as metadata rather than baking it into values.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import torch
from scipy.linalg import eigh
from scipy.spatial.distance import cdist

from . import codec
from .features import ExtractorNotFound  # re-exported for callers


class MetricsError(RuntimeError):
    pass


@dataclass(frozen=True)
class UndefinedScore:
    """Returned when a score has no value (e.g. single-crop intra metrics)."""

    reason: str


# ----------------------------------------------------------------- cropping

def nonoverlapping_views(image: np.ndarray, view_px: int) -> list[np.ndarray]:
    """Split a panorama into floor(long/view_px) non-overlapping square crops."""
    h, w = image.shape[:2]
    if h == view_px:
        count = w // view_px
        return [image[:, i * view_px : (i + 1) * view_px] for i in range(count)]
    if w == view_px:
        count = h // view_px
        return [image[i * view_px : (i + 1) * view_px, :] for i in range(count)]
    raise MetricsError(
        f"one image side must equal the view size {view_px}, got {h}x{w}"
    )


def _crop_pairs(image: np.ndarray, view_px: int):
    crops = nonoverlapping_views(image, view_px)
    if len(crops) < 2:
        return crops, None
    return crops, list(combinations(range(len(crops)), 2))


# ------------------------------------------------------------- intra scores

def perceptual_distance(a: np.ndarray, b: np.ndarray, extractor) -> float:
    """Feature-space distance: channel-normalized squared differences of the
    tapped activation maps, averaged over taps."""
    total = 0.0
    taps_a = extractor.feature_maps(a)
    taps_b = extractor.feature_maps(b)
    for fa, fb in zip(taps_a, taps_b):
        na = fa / fa.norm(dim=0, keepdim=True).clamp_min(1e-10)
        nb = fb / fb.norm(dim=0, keepdim=True).clamp_min(1e-10)
        total += float(((na - nb) ** 2).sum(dim=0).mean())
    return total / len(taps_a)


def style_loss_from_maps(maps_a, maps_b) -> float:
    """Gram-matrix style loss: per layer 1/(4 C^2 M^2) * sum((G_a - G_b)^2)."""
    total = 0.0
    for fa, fb in zip(maps_a, maps_b):
        c = fa.shape[0]
        m = fa.shape[1] * fa.shape[2]
        ga = fa.reshape(c, m) @ fa.reshape(c, m).T
        gb = fb.reshape(c, m) @ fb.reshape(c, m).T
        total += float(((ga - gb) ** 2).sum()) / (4.0 * c * c * m * m)
    return total


def intra_lpips(image: np.ndarray, extractor, view_px: int | None = None):
    """Mean perceptual distance over all crop pairs of one panorama."""
    view_px = view_px or min(image.shape[:2])
    crops, pairs = _crop_pairs(image, view_px)
    if pairs is None:
        return UndefinedScore(f"only {len(crops)} crop(s); need >= 2 for intra scores")
    dists = [perceptual_distance(crops[i], crops[j], extractor) for i, j in pairs]
    return float(np.mean(dists))


def intra_style_loss(image: np.ndarray, extractor, view_px: int | None = None):
    """Mean Gram-style loss over all crop pairs of one panorama."""
    view_px = view_px or min(image.shape[:2])
    crops, pairs = _crop_pairs(image, view_px)
    if pairs is None:
        return UndefinedScore(f"only {len(crops)} crop(s); need >= 2 for intra scores")
    maps = [extractor.feature_maps(c) for c in crops]
    losses = [style_loss_from_maps(maps[i], maps[j]) for i, j in pairs]
    return float(np.mean(losses))


# -------------------------------------------------------------- text score

def random_view_crop(image: np.ndarray, view_px: int, rng: np.random.Generator
                     ) -> np.ndarray:
    h, w = image.shape[:2]
    if h < view_px or w < view_px:
        raise MetricsError(f"image {h}x{w} smaller than crop size {view_px}")
    top = int(rng.integers(0, h - view_px + 1))
    left = int(rng.integers(0, w - view_px + 1))
    return image[top : top + view_px, left : left + view_px]


def mean_clip_score(
    images: list[np.ndarray],
    prompt: str,
    extractor,
    rng_seed: int = 0,
    view_px: int | None = None,
    convention: str = "cos100",
) -> float:
    """Mean text-crop similarity over one seeded view-sized crop per image.

    cos100 reports 100 * max(0, cos); "clip-s" uses the 2.5-weighted variant.
    """
    if convention not in ("cos100", "clip-s"):
        raise MetricsError(f"unknown mclip convention {convention!r}")
    text = np.asarray(extractor.embed_text(prompt), dtype=np.float64)
    text = text / np.linalg.norm(text)
    rng = np.random.default_rng(rng_seed)
    scores = []
    for image in images:
        px = view_px or min(image.shape[:2])
        crop = random_view_crop(image, px, rng)
        emb = np.asarray(extractor.embed_image(crop), dtype=np.float64)
        norm = np.linalg.norm(emb)
        cos = float(emb @ text / norm) if norm > 0 else 0.0
        if convention == "cos100":
            scores.append(100.0 * max(0.0, cos))
        else:
            scores.append(2.5 * max(0.0, cos))
    return float(np.mean(scores))


# ------------------------------------------------------- distribution scores

def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to the two feature sets."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    d = a.shape[1]
    if min(a.shape[0], b.shape[0]) <= d:
        warnings.warn(
            f"feature count ({a.shape[0]}, {b.shape[0]}) <= dim {d}; "
            "covariance estimates will be degenerate",
            stacklevel=2,
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    diff = mu_a - mu_b

    def _psd_sqrt(mat):
        vals, vecs = eigh(mat)
        vals = _clip_eigenvalues(vals)
        return (vecs * np.sqrt(vals)) @ vecs.T

    sqrt_a = _psd_sqrt(cov_a)
    vals = eigh(sqrt_a @ cov_b @ sqrt_a, eigvals_only=True)
    tr_sqrt = np.sqrt(_clip_eigenvalues(vals)).sum()
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def _clip_eigenvalues(vals: np.ndarray, floor: float = -1e-8) -> np.ndarray:
    if vals.min() < floor * max(1.0, abs(vals).max()):
        warnings.warn(
            f"clipping eigenvalue {vals.min():.3e} below the {floor} floor",
            stacklevel=3,
        )
    return np.clip(vals, 0.0, None)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared maximum-mean-discrepancy with the cubic polynomial
    kernel (diagonal terms excluded)."""
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise MetricsError("need at least two samples per side for unbiased MMD")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def kid(
    features_a: np.ndarray,
    features_b: np.ndarray,
    subset_size: int = 100,
    subsets: int = 10,
    seed: int = 0,
) -> float:
    """Mean unbiased MMD^2 over seeded random subsets."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if subset_size > min(a.shape[0], b.shape[0]):
        raise MetricsError(
            f"subset_size {subset_size} exceeds set sizes {a.shape[0]}, {b.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(subsets):
        ia = rng.choice(a.shape[0], subset_size, replace=False)
        ib = rng.choice(b.shape[0], subset_size, replace=False)
        vals.append(mmd2_unbiased(a[ia], b[ib]))
    return float(np.mean(vals))


def mean_giqa(
    features_gen: np.ndarray,
    features_ref: np.ndarray,
    k_neighbors: int = 3,
    ceiling: float = 1e6,
) -> float:
    """KNN density score: per generated feature, the inverse mean distance to
    its k nearest reference features (capped at `ceiling`), averaged."""
    gen = np.asarray(features_gen, dtype=np.float64)
    ref = np.asarray(features_ref, dtype=np.float64)
    if k_neighbors >= ref.shape[0]:
        raise MetricsError(
            f"k_neighbors {k_neighbors} must be < reference size {ref.shape[0]}"
        )
    dists = cdist(gen, ref)
    nearest = np.sort(dists, axis=1)[:, :k_neighbors]
    mean_d = nearest.mean(axis=1)
    scores = np.where(mean_d > 0, np.minimum(1.0 / np.maximum(mean_d, 1e-300), ceiling),
                      ceiling)
    return float(scores.mean())


# ------------------------------------------------------------ feature cache

class FeatureCache:
    """Per-image embedding cache keyed by (file content hash, extractor name)."""

    def __init__(self, cache_dir: str | Path):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _key(self, path: Path, extractor_name: str) -> Path:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()[:32]
        safe = extractor_name.replace("/", "_")
        return self.dir / f"{digest}__{safe}.npy"

    def get_or_compute(self, path: Path, extractor, image: np.ndarray) -> np.ndarray:
        key = self._key(path, extractor.name)
        if key.exists():
            return np.load(key)
        emb = np.asarray(extractor.embed_image(image), dtype=np.float32)
        np.save(key, emb)
        return emb


# ------------------------------------------------------------- full report

TABLE_SCALE = {"intra_style": 1000, "kid": 1000, "mgiqa": 1000}

ALL_SCORES = ("mclip", "intra_lpips", "intra_style", "fid", "kid", "mgiqa")
SCORE_GROUPS = {
    "all": ALL_SCORES,
    "intra": ("intra_lpips", "intra_style"),
    "dist": ("fid", "kid", "mgiqa"),
    "clip": ("mclip",),
}


@dataclass
class ScoreReport:
    mclip: object = None
    intra_lpips: object = None
    intra_style: object = None
    fid: object = None
    kid: object = None
    mgiqa: object = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, UndefinedScore):
                return {"undefined": v.reason}
            return v

        out = {name: enc(getattr(self, name)) for name in ALL_SCORES}
        out["table_scale"] = TABLE_SCALE
        out["metadata"] = self.metadata
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")


def _mean_or_undefined(values):
    undef = [v for v in values if isinstance(v, UndefinedScore)]
    if undef:
        return undef[0]
    return float(np.mean(values))


def load_image_dir(directory: str | Path) -> tuple[list[Path], list[np.ndarray]]:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise MetricsError(f"no PNG images in {directory}")
    return paths, [codec.read_image(p) for p in paths]


def evaluate_run(
    generated_dir: str | Path,
    reference_dir: str | Path,
    prompt: str,
    extractor,
    seed: int = 0,
    scores: str = "all",
    view_px: int | None = None,
    k_neighbors: int = 3,
    kid_subset_size: int | None = None,
    cache_dir: str | Path | None = None,
    mclip_convention: str = "cos100",
) -> ScoreReport:
    """Assemble the full evaluation protocol over two image directories."""
    if scores not in SCORE_GROUPS:
        raise MetricsError(f"unknown score group {scores!r}")
    wanted = SCORE_GROUPS[scores]
    gen_paths, gen_images = load_image_dir(generated_dir)
    report = ScoreReport()
    px = view_px or min(gen_images[0].shape[:2])
    crop_counts = [max(g.shape[0], g.shape[1]) // px for g in gen_images]
    report.metadata = {
        "extractor": extractor.name,
        "seed": seed,
        "view_px": px,
        "generated_count": len(gen_images),
        "crop_counts": crop_counts,
        "pair_counts": [k * (k - 1) // 2 for k in crop_counts],
        "mclip_convention": mclip_convention,
        "giqa_variant": "knn",
        "k_neighbors": k_neighbors,
    }

    if "intra_lpips" in wanted:
        report.intra_lpips = _mean_or_undefined(
            [intra_lpips(g, extractor, px) for g in gen_images]
        )
    if "intra_style" in wanted:
        report.intra_style = _mean_or_undefined(
            [intra_style_loss(g, extractor, px) for g in gen_images]
        )
    if "mclip" in wanted:
        report.mclip = mean_clip_score(
            gen_images, prompt, extractor, rng_seed=seed, view_px=px,
            convention=mclip_convention,
        )
    if any(s in wanted for s in ("fid", "kid", "mgiqa")):
        ref_paths, ref_images = load_image_dir(reference_dir)
        report.metadata["reference_count"] = len(ref_images)
        report.metadata["reference_set"] = str(reference_dir)
        cache = FeatureCache(cache_dir) if cache_dir else None
        rng = np.random.default_rng(seed)
        gen_feats = np.stack(
            [extractor.embed_image(random_view_crop(g, px, rng)) for g in gen_images]
        )
        if cache:
            ref_feats = np.stack(
                [cache.get_or_compute(p, extractor, im)
                 for p, im in zip(ref_paths, ref_images)]
            )
        else:
            ref_feats = np.stack([extractor.embed_image(im) for im in ref_images])
        if "fid" in wanted:
            report.fid = fid(gen_feats, ref_feats)
        if "kid" in wanted:
            subset = kid_subset_size or min(len(gen_feats), len(ref_feats))
            report.kid = kid(gen_feats, ref_feats, subset_size=subset, seed=seed)
        if "mgiqa" in wanted:
            report.mgiqa = mean_giqa(gen_feats, ref_feats, k_neighbors=k_neighbors)
    return report


def baseline_reference_scores(
    images: list[np.ndarray],
    extractor,
    seed: int = 0,
    n_pairs: int = 1000,
    k_neighbors: int = 3,
) -> dict:
    """Baseline self-comparison: distribution scores between two random halves
    and mean perceptual/style distances over random image pairs."""
    if len(images) < 4:
        raise MetricsError("need at least 4 images for a self-comparison")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    half = len(images) // 2
    feats = np.stack([extractor.embed_image(im) for im in images])
    a, b = feats[order[:half]], feats[order[half : 2 * half]]
    pair_idx = [
        tuple(rng.choice(len(images), 2, replace=False)) for _ in range(n_pairs)
    ]
    lpips_vals = [
        perceptual_distance(images[i], images[j], extractor) for i, j in pair_idx
    ]
    maps = {i: None for pair in pair_idx for i in pair}
    for i in maps:
        maps[i] = extractor.feature_maps(images[i])
    style_vals = [style_loss_from_maps(maps[i], maps[j]) for i, j in pair_idx]
    subset = min(len(a), len(b))
    return {
        "fid": fid(a, b),
        "kid": kid(a, b, subset_size=subset, seed=seed),
        "mgiqa": mean_giqa(a, b, k_neighbors=min(k_neighbors, len(b) - 1)),
        "lpips": float(np.mean(lpips_vals)),
        "style": float(np.mean(style_vals)),
        "pairs": n_pairs,
    }
