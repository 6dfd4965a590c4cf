"""Synthetic Gaussian language embeddings (stand-in for trained extractors)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lidkit.data import EmbeddingSet, LanguageList, LidError


@dataclass(frozen=True)
class SyntheticSpec:
    """Class means ``separation * u_k`` (orthonormal u_k when dim >= K) plus
    a shared offset, and isotropic Gaussian noise.

    ``noise_scale`` is the RMS norm of the noise vector (per-dimension std
    ``noise_scale / sqrt(dim)``), so separation / noise compares the norm of a
    class mean to the norm of a typical noise draw independently of ``dim``.
    """

    n_languages: int = 13
    dim: int = 64
    per_class_count: int = 100
    class_separation: float = 4.0
    noise_scale: float = 1.0
    offset_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_languages < 2:
            raise LidError("need at least 2 languages")
        if self.dim < 1 or self.per_class_count < 1:
            raise LidError("dim and per_class_count must be >= 1")
        if self.class_separation < 0 or self.noise_scale <= 0:
            raise LidError("separation must be >= 0 and noise_scale > 0")

    @property
    def languages(self) -> LanguageList:
        return LanguageList(f"lang{k:02d}" for k in range(self.n_languages))


class SyntheticGenerator:
    """Fixed class geometry drawn once from ``spec.seed``; samples on demand."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        k, d = spec.n_languages, spec.dim
        if d >= k:
            q, _ = np.linalg.qr(rng.normal(size=(d, k)))
            dirs = q.T
        else:
            dirs = rng.normal(size=(k, d))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        offset = rng.normal(size=d)
        offset *= spec.offset_scale / np.linalg.norm(offset)
        self.means = spec.class_separation * dirs + offset

    def sample(self, counts, rng, prefix: str = "utt") -> EmbeddingSet:
        """Draw ``counts[k]`` vectors for each language k (int = same count for all)."""
        spec = self.spec
        counts = np.broadcast_to(np.asarray(counts, dtype=np.int64), (spec.n_languages,))
        if (counts < 0).any():
            raise LidError("counts must be non-negative")
        labels = np.repeat(np.arange(spec.n_languages), counts)
        sd = spec.noise_scale / np.sqrt(spec.dim)
        x = self.means[labels] + sd * rng.normal(size=(labels.size, spec.dim))
        ids = [f"{prefix}{i:06d}" for i in range(labels.size)]
        return EmbeddingSet(ids=ids, vectors=x, labels=labels)


def generate(spec: SyntheticSpec, counts=None, seed: int | None = None, prefix: str = "utt") -> EmbeddingSet:
    gen = SyntheticGenerator(spec)
    rng = np.random.default_rng([spec.seed, 1 if seed is None else 2 + seed])
    return gen.sample(spec.per_class_count if counts is None else counts, rng, prefix)
