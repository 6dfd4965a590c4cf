"""Domain types and file formats shared by the rest of the package.

File formats:

* manifests are JSON lines with ``id`` and optional ``audio``, ``label``
  and ``duration`` fields;
* embeddings are a small binary container (magic ``LIDE``, u32 version,
  u32 N, u32 D, then N*D little-endian float32, row-major);
* score matrices are tab-separated text, header ``id<TAB>lang...``;
* models are versioned JSON (see :func:`save_model`).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EMBEDDING_MAGIC = b"LIDE"
EMBEDDING_VERSION = 1
MODEL_VERSION = 1

_HEADER = struct.Struct("<4sIII")


class LidError(ValueError):
    """Raised for invalid inputs, malformed files and contract violations."""


class ModelVersionError(LidError):
    pass


@dataclass(frozen=True)
class LanguageList:
    """Ordered, duplicate-free list of language names.

    The order is the canonical column order of every score matrix.
    """

    names: tuple[str, ...]

    def __init__(self, names: Iterable[str]):
        names = tuple(str(n) for n in names)
        if not names:
            raise LidError("language list is empty")
        seen = set()
        for n in names:
            if n in seen:
                raise LidError(f"duplicate language {n!r} in language list")
            seen.add(n)
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __getitem__(self, i: int) -> str:
        return self.names[i]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise LidError(f"unknown language {name!r}") from None


@dataclass(frozen=True)
class Utterance:
    id: str
    audio_path: str | None = None
    label: int | None = None
    duration_s: float | None = None


def _check_unique(ids: Sequence[str], what: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise LidError(f"duplicate id {i!r} in {what}")
        seen.add(i)


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """N utterance embeddings of dimension D, float64 in memory."""

    ids: tuple[str, ...]
    vectors: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise LidError(f"embedding matrix must be N x D with N, D >= 1, got shape {vectors.shape}")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != vectors.shape[0]:
            raise LidError(f"{len(ids)} ids for {vectors.shape[0]} embedding rows")
        _check_unique(ids, "embedding set")
        bad = np.flatnonzero(~np.isfinite(vectors).all(axis=1))
        if bad.size:
            raise LidError(f"non-finite value in embedding row {int(bad[0])}")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (vectors.shape[0],):
                raise LidError(f"{labels.shape[0]} labels for {vectors.shape[0]} embeddings")
        vectors.setflags(write=False)
        if labels is not None:
            labels.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, rows) -> EmbeddingSet:
        rows = np.asarray(rows)
        return EmbeddingSet(
            ids=[self.ids[i] for i in rows],
            vectors=self.vectors[rows],
            labels=None if self.labels is None else self.labels[rows],
        )


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """N x K natural-log likelihood scores, columns ordered as ``languages``."""

    ids: tuple[str, ...]
    scores: np.ndarray
    languages: LanguageList

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64)
        languages = self.languages
        if not isinstance(languages, LanguageList):
            languages = LanguageList(languages)
        ids = tuple(str(i) for i in self.ids)
        if scores.ndim != 2 or scores.shape != (len(ids), len(languages)):
            raise LidError(
                f"score matrix shape {scores.shape} does not match "
                f"{len(ids)} ids x {len(languages)} languages"
            )
        _check_unique(ids, "score matrix")
        if not np.isfinite(scores).all():
            row = int(np.flatnonzero(~np.isfinite(scores).all(axis=1))[0])
            raise LidError(f"non-finite score in row {row} ({ids[row]!r})")
        scores.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "languages", languages)

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def k(self) -> int:
        return self.scores.shape[1]

    def reorder(self, ids: Sequence[str]) -> ScoreMatrix:
        """Return the rows for ``ids`` in that order; every id must be present."""
        pos = {u: i for i, u in enumerate(self.ids)}
        missing = [u for u in ids if u not in pos]
        if missing:
            raise LidError(f"id {missing[0]!r} has no scores")
        rows = [pos[u] for u in ids]
        return ScoreMatrix(ids=list(ids), scores=self.scores[rows], languages=self.languages)


@dataclass(frozen=True, eq=False)
class TrialLabels:
    ids: tuple[str, ...]
    true_lang: np.ndarray
    languages: LanguageList | None = field(default=None)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        true_lang = np.array(self.true_lang, dtype=np.int64)
        if true_lang.shape != (len(ids),):
            raise LidError(f"{true_lang.shape[0]} labels for {len(ids)} ids")
        _check_unique(ids, "trial labels")
        if self.languages is not None:
            k = len(self.languages)
            bad = np.flatnonzero((true_lang < 0) | (true_lang >= k))
            if bad.size:
                raise LidError(f"label index {int(true_lang[bad[0]])} out of range for {ids[bad[0]]!r}")
        true_lang.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "true_lang", true_lang)


def align(scores: ScoreMatrix, labels: TrialLabels) -> tuple[np.ndarray, np.ndarray]:
    """Match scores and labels by id.

    Returns the score rows and label indices in label order. Ids must match
    as sets.
    """
    pos = {u: i for i, u in enumerate(scores.ids)}
    for u in labels.ids:
        if u not in pos:
            raise LidError(f"id {u!r} in labels has no scores")
    if len(pos) != len(labels.ids):
        lab = set(labels.ids)
        extra = next(u for u in scores.ids if u not in lab)
        raise LidError(f"id {extra!r} in scores has no label")
    k = scores.k
    y = labels.true_lang
    bad = np.flatnonzero((y < 0) | (y >= k))
    if bad.size:
        raise LidError(f"label index {int(y[bad[0]])} out of range for {labels.ids[bad[0]]!r}")
    rows = np.fromiter((pos[u] for u in labels.ids), dtype=np.int64, count=len(labels.ids))
    return scores.scores[rows], np.asarray(y)


# -- manifests -------------------------------------------------------------

def read_manifest(path, languages: LanguageList | Sequence[str] | None = None) -> list[Utterance]:
    """Parse a JSONL manifest.

    Label strings are resolved against ``languages``; a manifest with labels
    but no language list is an error.
    """
    if languages is not None and not isinstance(languages, LanguageList):
        languages = LanguageList(languages)
    utts: list[Utterance] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise LidError(f"{path}:{lineno}: malformed line ({e.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("id"), str):
                raise LidError(f"{path}:{lineno}: malformed line (missing string field 'id')")
            uid = rec["id"]
            if uid in seen:
                raise LidError(f"{path}:{lineno}: duplicate id {uid!r}")
            seen.add(uid)
            label = rec.get("label")
            if label is not None:
                if languages is None:
                    raise LidError(f"{path}:{lineno}: label {label!r} given but no language list declared")
                if label not in languages.names:
                    raise LidError(f"{path}:{lineno}: unknown label {label!r}")
                label = languages.names.index(label)
            duration = rec.get("duration")
            if duration is not None:
                try:
                    duration = float(duration)
                except (TypeError, ValueError):
                    raise LidError(f"{path}:{lineno}: malformed duration {duration!r}") from None
            audio = rec.get("audio")
            if audio is not None and not isinstance(audio, str):
                raise LidError(f"{path}:{lineno}: malformed audio path {audio!r}")
            utts.append(Utterance(id=uid, audio_path=audio, label=label, duration_s=duration))
    if not utts:
        raise LidError(f"{path}: empty manifest")
    return utts


def write_manifest(path, utts: Sequence[Utterance], languages: LanguageList) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in utts:
            rec: dict = {"id": u.id}
            if u.audio_path is not None:
                rec["audio"] = u.audio_path
            if u.label is not None:
                rec["label"] = languages[u.label]
            if u.duration_s is not None:
                rec["duration"] = u.duration_s
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def labels_from_manifest(utts: Sequence[Utterance], languages: LanguageList) -> TrialLabels:
    missing = [u.id for u in utts if u.label is None]
    if missing:
        raise LidError(f"utterance {missing[0]!r} has no label")
    return TrialLabels(ids=[u.id for u in utts], true_lang=[u.label for u in utts], languages=languages)


def read_languages(path) -> LanguageList:
    """Read a language list from a JSON config (``{"languages": [...]}``) or a plain list."""
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    if isinstance(obj, dict):
        obj = obj.get("languages")
    if not isinstance(obj, list):
        raise LidError(f"{path}: no language list found")
    return LanguageList(obj)


# -- embeddings ------------------------------------------------------------

def write_embeddings(path, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise LidError("embeddings must be a 2-D matrix")
    n, d = vectors.shape
    payload = np.ascontiguousarray(vectors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, n, d))
        f.write(payload.tobytes())


def read_embedding_matrix(path) -> np.ndarray:
    """Read the raw N x D matrix (float64) from an embedding file."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size or data[:4] != EMBEDDING_MAGIC:
        raise LidError(f"{path}: not an embedding file")
    _, version, n, d = _HEADER.unpack_from(data)
    if version != EMBEDDING_VERSION:
        raise LidError(f"{path}: unsupported embedding file version {version}")
    expected = n * d * 4
    actual = len(data) - _HEADER.size
    if actual != expected:
        raise LidError(f"{path}: truncated payload, expected {expected} bytes, got {actual}")
    mat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, d).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(mat).all(axis=1))
    if bad.size:
        raise LidError(f"{path}: non-finite value in row {int(bad[0])}")
    return mat


def read_embeddings(path, utts: Sequence[Utterance] | None = None) -> EmbeddingSet:
    """Read an embedding file.

    Row i belongs to the i-th manifest utterance when ``utts`` is given;
    otherwise ids are the row numbers as strings.
    """
    mat = read_embedding_matrix(path)
    if utts is None:
        return EmbeddingSet(ids=[str(i) for i in range(mat.shape[0])], vectors=mat)
    if len(utts) != mat.shape[0]:
        raise LidError(f"{path}: {mat.shape[0]} embeddings for {len(utts)} manifest entries")
    labels = None
    if all(u.label is not None for u in utts):
        labels = [u.label for u in utts]
    return EmbeddingSet(ids=[u.id for u in utts], vectors=mat, labels=labels)


# -- score matrices --------------------------------------------------------

def write_scores(path, sm: ScoreMatrix) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(["id", *sm.languages.names]) + "\n")
        for uid, row in zip(sm.ids, sm.scores):
            f.write("\t".join([uid, *(repr(float(v)) for v in row)]) + "\n")


def read_scores(path) -> ScoreMatrix:
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines:
        raise LidError(f"{path}: empty score file")
    header = lines[0].split("\t")
    if header[0] != "id" or len(header) < 2:
        raise LidError(f"{path}: bad header, expected 'id<TAB>language...'")
    languages = LanguageList(header[1:])
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise LidError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            raise LidError(f"{path}:{lineno}: non-numeric score") from None
        ids.append(parts[0])
    if not rows:
        raise LidError(f"{path}: no score rows")
    return ScoreMatrix(ids=ids, scores=np.array(rows), languages=languages)


# -- model serialization ---------------------------------------------------

def _floats(a) -> list:
    """Nested lists of Python floats; json writes them with repr precision."""
    return np.asarray(a, dtype=np.float64).tolist()


def _check_float_list(value, name: str):
    arr = np.asarray(value, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise LidError(f"model field {name!r} has non-finite entries")
    return arr


def model_to_dict(model) -> dict:
    from lidkit.backend import BackendModel
    from lidkit.fusion import FusionModel

    if isinstance(model, BackendModel):
        return {
            "kind": "backend",
            "version": MODEL_VERSION,
            "languages": list(model.languages.names),
            "order": model.order,
            "mean": _floats(model.mean),
            "lda": None if model.lda is None else _floats(model.lda),
            "weights": _floats(model.weights),
            "bias": _floats(model.bias),
            "balance_weights": _floats(model.balance_weights),
        }
    if isinstance(model, FusionModel):
        return {
            "kind": "fusion",
            "version": MODEL_VERSION,
            "languages": list(model.languages.names),
            "alphas": _floats(model.alphas),
            "betas": _floats(model.betas),
        }
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_dict(obj: dict):
    from lidkit.backend import BackendModel
    from lidkit.fusion import FusionModel

    if not isinstance(obj, dict):
        raise LidError("model file must contain a JSON object")
    version = obj.get("version")
    if version != MODEL_VERSION:
        raise ModelVersionError(f"unsupported model version {version!r}")

    def need(name):
        if name not in obj:
            raise LidError(f"model file is missing field {name!r}")
        return obj[name]

    kind = need("kind")
    languages = LanguageList(need("languages"))
    if kind == "backend":
        lda = need("lda")
        return BackendModel(
            mean=_check_float_list(need("mean"), "mean"),
            lda=None if lda is None else _check_float_list(lda, "lda"),
            weights=_check_float_list(need("weights"), "weights"),
            bias=_check_float_list(need("bias"), "bias"),
            languages=languages,
            balance_weights=_check_float_list(need("balance_weights"), "balance_weights"),
            order=need("order"),
        )
    if kind == "fusion":
        return FusionModel(
            alphas=_check_float_list(need("alphas"), "alphas"),
            betas=_check_float_list(need("betas"), "betas"),
            languages=languages,
        )
    raise LidError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    text = json.dumps(model_to_dict(model), indent=1, allow_nan=False)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text + "\n")
    os.replace(tmp, path)


def load_model(path):
    with open(path, encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise LidError(f"{path}: malformed model file ({e.msg})") from None
    return model_from_dict(obj)
