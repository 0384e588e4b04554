"""Prompt-embedding providers.

A provider exposes embed(text) and null_embedding() only; the bundled toy
provider hashes the text into a seed and draws fixed Gaussian token rows, so
tests get a real conditioning signal without any external model.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch


class EmbeddingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptEmbedding:
    data: torch.Tensor  # (tokens, dim)
    is_null: bool = False

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


_NULL_SEED = 0x6D61646E  # fixed so the null embedding is stable across processes


def _seeded_rows(seed: int, tokens: int, dim: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(tokens, dim, generator=gen)


class ToyTextEmbedder:
    """Deterministic hash-seeded embedder: 8 tokens x 32 dims by default."""

    def __init__(self, tokens: int = 8, dim: int = 32):
        self.tokens = tokens
        self.dim = dim
        self._null = PromptEmbedding(
            data=_seeded_rows(_NULL_SEED, tokens, dim), is_null=True
        )

    def embed(self, text: str) -> PromptEmbedding:
        if text == "":
            return self._null
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little") % (2**63)
        return PromptEmbedding(data=_seeded_rows(seed, self.tokens, self.dim))

    def null_embedding(self) -> PromptEmbedding:
        return self._null
