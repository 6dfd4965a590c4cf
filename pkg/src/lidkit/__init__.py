"""Spoken language identification backend and evaluation toolkit."""

from lidkit.data import (
    EmbeddingSet,
    LanguageList,
    ScoreMatrix,
    TrialLabels,
    Utterance,
)

__version__ = "0.1.0"

__all__ = [
    "EmbeddingSet",
    "LanguageList",
    "ScoreMatrix",
    "TrialLabels",
    "Utterance",
    "__version__",
]
