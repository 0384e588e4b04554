"""Desk-scale feature extractors for the evaluation metrics.

The random-convolution stack is fixed and seeded, so every metric is
verifiable without pretrained networks; real perceptual/style/text-image
extractors plug in through the same duck-typed surface (name, feature_maps,
embed_image, embed_text).
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F


class ExtractorNotFound(KeyError):
    pass


class RandomConvFeatures:
    """Three fixed random conv layers with tanh, tapped for perceptual and
    style features; pooled taps project to a joint embedding space."""

    deterministic = True

    def __init__(self, seed: int = 0, embed_dim: int = 32):
        self.name = f"randconv-{seed}-{embed_dim}"
        self.embed_dim = embed_dim
        self._seed = seed
        gen = torch.Generator().manual_seed(seed)
        dims = [(3, 8), (8, 16), (16, 32)]
        self._weights = []
        for cin, cout in dims:
            w = torch.randn(cout, cin, 3, 3, generator=gen) / (9 * cin) ** 0.5
            self._weights.append(w)
        pooled = sum(cout for _, cout in dims)
        self._proj = torch.randn(pooled, embed_dim, generator=gen) / pooled**0.5

    def feature_maps(self, image: np.ndarray) -> list[torch.Tensor]:
        """Tapped activations, each (C, h, w), for a float [0,1] RGB image."""
        x = torch.from_numpy(np.asarray(image, dtype=np.float32))
        x = x.permute(2, 0, 1).unsqueeze(0) * 2.0 - 1.0
        taps = []
        with torch.no_grad():
            for w in self._weights:
                x = torch.tanh(F.conv2d(x, w, stride=2, padding=1))
                taps.append(x[0])
        return taps

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        taps = self.feature_maps(image)
        pooled = torch.cat([t.mean(dim=(1, 2)) for t in taps])
        return (pooled @ self._proj).numpy().astype(np.float64)

    def embed_text(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self._seed}:{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.embed_dim)
        return v / np.linalg.norm(v)


EXTRACTORS = {
    "randconv": RandomConvFeatures,
}


def get_extractor(name: str, **kwargs):
    if name not in EXTRACTORS:
        raise ExtractorNotFound(
            f"no extractor named {name!r}; available: {sorted(EXTRACTORS)}"
        )
    return EXTRACTORS[name](**kwargs)
