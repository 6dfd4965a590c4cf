"""AugMix-style waveform augmentation.

A clean signal is copied into ``n_paths`` branches. Each branch gets a
random chain of 1..``max_chain_len`` transforms (reverberation, additive
noise, speed change) with random parameters. The branches are mixed with
Dirichlet weights and the mixture is interpolated with the clean signal::

    out = (1 - m) * x + m * sum_i w_i * path_i(x),   m ~ Beta(a, a)

so ``m = 0`` gives back the clean signal. Everything is drawn from a
single seed; :func:`utterance_seed` derives per-utterance seeds so batch
results do not depend on processing order.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from lidkit.audio import AudioBuffer, read_wav, rms, sinc_interpolate
from lidkit.data import LidError

REVERB = "reverb"
NOISE = "noise"
SPEED = "speed"
ALL_TRANSFORMS = (REVERB, NOISE, SPEED)

_DIRECT_CONV_MAX_TAPS = 256


@dataclass(frozen=True)
class AugmentConfig:
    n_paths: int = 3
    max_chain_len: int = 3
    transforms: tuple[str, ...] = (REVERB, NOISE)
    snr_range_db: tuple[float, float] = (0.0, 15.0)
    speed_factors: tuple[float, ...] = (0.9, 1.0, 1.1)
    dirichlet_alpha: float = 1.0
    beta_alpha: float = 1.0
    rir_dir: str | None = None
    noise_dir: str | None = None
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.transforms) - set(ALL_TRANSFORMS)
        if unknown:
            raise LidError(f"unknown transform(s) {sorted(unknown)}")
        object.__setattr__(self, "transforms", tuple(t for t in ALL_TRANSFORMS if t in set(self.transforms)))
        object.__setattr__(self, "snr_range_db", tuple(float(v) for v in self.snr_range_db))
        object.__setattr__(self, "speed_factors", tuple(float(v) for v in self.speed_factors))
        if self.n_paths < 1:
            raise LidError("n_paths must be >= 1")
        if self.max_chain_len < 1:
            raise LidError("max_chain_len must be >= 1")
        if not self.transforms:
            raise LidError("no transforms enabled")
        if len(self.snr_range_db) != 2 or self.snr_range_db[0] > self.snr_range_db[1]:
            raise LidError(f"bad SNR range {self.snr_range_db}")
        if not self.speed_factors or min(self.speed_factors) <= 0:
            raise LidError("speed factors must be positive")
        if self.dirichlet_alpha <= 0 or self.beta_alpha <= 0:
            raise LidError("Dirichlet and Beta concentrations must be positive")

    @classmethod
    def from_dict(cls, obj: dict) -> AugmentConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise LidError(f"unknown augment config key(s): {sorted(unknown)}")
        obj = dict(obj)
        for key in ("transforms", "snr_range_db", "speed_factors"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("transforms", "snr_range_db", "speed_factors"):
            d[key] = list(d[key])
        return d


@dataclass(frozen=True)
class TransformStep:
    kind: str
    rir: str | None = None
    noise: str | None = None
    snr_db: float | None = None
    noise_offset: float | None = None
    speed: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class AugmentPlan:
    paths: tuple[tuple[TransformStep, ...], ...]
    path_weights: tuple[float, ...]
    interp: float
    seed: int

    def __post_init__(self):
        w = np.asarray(self.path_weights, dtype=np.float64)
        if w.size != len(self.paths) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise LidError("path weights must be a probability vector, one per path")
        if not 0.0 <= self.interp <= 1.0:
            raise LidError(f"interpolation weight {self.interp} outside [0, 1]")
        if any(len(p) < 1 for p in self.paths):
            raise LidError("every augmentation path needs at least one transform")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "interp": self.interp,
            "path_weights": list(self.path_weights),
            "paths": [[s.to_dict() for s in p] for p in self.paths],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> AugmentPlan:
        return cls(
            paths=tuple(tuple(TransformStep(**s) for s in p) for p in obj["paths"]),
            path_weights=tuple(obj["path_weights"]),
            interp=float(obj["interp"]),
            seed=int(obj["seed"]),
        )


def _list_wavs(directory: str | os.PathLike | None, what: str) -> tuple[str, ...]:
    if directory is None:
        raise LidError(f"{what} transform enabled but no {what} directory configured")
    d = Path(directory)
    if not d.is_dir():
        raise LidError(f"{what} directory {str(d)!r} does not exist")
    files = tuple(sorted(str(p) for p in d.rglob("*.wav")))
    if not files:
        raise LidError(f"{what} directory {str(d)!r} contains no .wav files")
    return files


@dataclass
class AugmentResources:
    """RIR and noise recordings, loaded lazily and cached at one sample rate."""

    rir_files: tuple[str, ...] = ()
    noise_files: tuple[str, ...] = ()
    sample_rate: int = 16000
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_config(cls, config: AugmentConfig) -> AugmentResources:
        rirs = _list_wavs(config.rir_dir, "rir") if REVERB in config.transforms else ()
        noises = _list_wavs(config.noise_dir, "noise") if NOISE in config.transforms else ()
        return cls(rir_files=rirs, noise_files=noises, sample_rate=config.sample_rate)

    @classmethod
    def in_memory(cls, rirs: dict[str, AudioBuffer] | None = None,
                  noises: dict[str, AudioBuffer] | None = None, sample_rate: int = 16000):
        rirs = rirs or {}
        noises = noises or {}
        res = cls(rir_files=tuple(sorted(rirs)), noise_files=tuple(sorted(noises)), sample_rate=sample_rate)
        res._cache.update(rirs)
        res._cache.update(noises)
        return res

    def load(self, name: str) -> AudioBuffer:
        buf = self._cache.get(name)
        if buf is None:
            buf = read_wav(name, self.sample_rate)
            self._cache[name] = buf
        return buf


def utterance_seed(seed: int, utt_id: str) -> int:
    """Stable 63-bit seed for one utterance, independent of processing order."""
    h = hashlib.sha256(f"{int(seed)}\x00{utt_id}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def sample_plan(config: AugmentConfig, seed: int, resources: AugmentResources | None = None) -> AugmentPlan:
    if resources is None:
        resources = AugmentResources.from_config(config)
    if REVERB in config.transforms and not resources.rir_files:
        raise LidError("reverb transform enabled but no RIR files available")
    if NOISE in config.transforms and not resources.noise_files:
        raise LidError("noise transform enabled but no noise files available")
    rng = np.random.default_rng(seed)
    enabled = config.transforms
    lo, hi = config.snr_range_db
    paths = []
    for _ in range(config.n_paths):
        chain = []
        for _ in range(int(rng.integers(1, config.max_chain_len + 1))):
            kind = enabled[int(rng.integers(len(enabled)))]
            if kind == REVERB:
                chain.append(TransformStep(REVERB, rir=resources.rir_files[int(rng.integers(len(resources.rir_files)))]))
            elif kind == NOISE:
                chain.append(TransformStep(
                    NOISE,
                    noise=resources.noise_files[int(rng.integers(len(resources.noise_files)))],
                    snr_db=float(rng.uniform(lo, hi)),
                    noise_offset=float(rng.random()),
                ))
            else:
                chain.append(TransformStep(SPEED, speed=float(config.speed_factors[int(rng.integers(len(config.speed_factors)))])))
        paths.append(tuple(chain))
    weights = rng.dirichlet(np.full(config.n_paths, config.dirichlet_alpha))
    weights = weights / weights.sum()
    interp = float(rng.beta(config.beta_alpha, config.beta_alpha))
    return AugmentPlan(paths=tuple(paths), path_weights=tuple(float(w) for w in weights),
                       interp=interp, seed=int(seed))


# -- transforms ------------------------------------------------------------

def _same_rate(a: AudioBuffer, b: AudioBuffer, what: str) -> None:
    if a.sample_rate != b.sample_rate:
        raise LidError(f"{what} sample rate {b.sample_rate} Hz does not match signal rate {a.sample_rate} Hz")


def apply_reverb(x: AudioBuffer, rir: AudioBuffer) -> AudioBuffer:
    """Convolve with ``rir``, keep the first len(x) samples, restore the input RMS, clip."""
    _same_rate(x, rir, "RIR")
    n = len(x)
    if rir.samples.size <= _DIRECT_CONV_MAX_TAPS:
        y = np.convolve(x.samples, rir.samples)[:n]
    else:
        y = fftconvolve(x.samples, rir.samples)[:n]
    target, got = rms(x.samples), rms(y)
    if got > 0:
        y = y * (target / got)
    return x.with_samples(np.clip(y, -1.0, 1.0))


def fit_noise(noise: np.ndarray, n: int, offset: float = 0.0) -> np.ndarray:
    """Loop or crop ``noise`` to ``n`` samples starting at fraction ``offset`` of its length."""
    start = int(offset * noise.size) % noise.size
    idx = (start + np.arange(n)) % noise.size
    return noise[idx]


def scale_noise(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    p_noise = rms(noise)
    if p_noise == 0:
        raise LidError("noise recording is silent")
    return noise * (rms(signal) / p_noise) * 10.0 ** (-snr_db / 20.0)


def apply_noise(x: AudioBuffer, noise: AudioBuffer, snr_db: float, offset: float = 0.0) -> AudioBuffer:
    _same_rate(x, noise, "noise")
    seg = fit_noise(noise.samples, len(x), offset)
    if rms(seg) == 0:
        raise LidError("noise segment is silent")
    y = x.samples + scale_noise(x.samples, seg, snr_db)
    return x.with_samples(np.clip(y, -1.0, 1.0))


def apply_speed(x: AudioBuffer, factor: float) -> AudioBuffer:
    """Play ``factor`` times faster: round(len/factor) samples at the same rate."""
    if not factor > 0:
        raise LidError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return x.with_samples(x.samples.copy())
    n_out = int(round(len(x) / factor))
    if n_out < 1:
        raise LidError("speed change would produce an empty signal")
    positions = np.arange(n_out) * factor
    y = sinc_interpolate(x.samples, positions, cutoff=min(1.0, 1.0 / factor))
    return x.with_samples(np.clip(y, -1.0, 1.0))


def _fit_length(y: np.ndarray, n: int) -> np.ndarray:
    if y.size >= n:
        return y[:n]
    return np.concatenate([y, np.zeros(n - y.size)])


def apply_chain(x: AudioBuffer, chain: Sequence[TransformStep], resources: AugmentResources) -> AudioBuffer:
    """Run one path; the result always has len(x) samples (speed output is cropped or zero-padded)."""
    y = x
    for step in chain:
        if step.kind == REVERB:
            y = apply_reverb(y, resources.load(step.rir))
        elif step.kind == NOISE:
            y = apply_noise(y, resources.load(step.noise), step.snr_db, step.noise_offset or 0.0)
        elif step.kind == SPEED:
            y = apply_speed(y, step.speed)
            y = y.with_samples(_fit_length(y.samples, len(x)))
        else:
            raise LidError(f"unknown transform {step.kind!r}")
    return y


def augmix(x: AudioBuffer, plan: AugmentPlan, resources: AugmentResources) -> AudioBuffer:
    m = plan.interp
    if m == 0.0:
        return x.with_samples(x.samples.copy())
    mix = np.zeros(len(x))
    for w, chain in zip(plan.path_weights, plan.paths):
        mix += w * apply_chain(x, chain, resources).samples
    out = (1.0 - m) * x.samples + m * mix
    return x.with_samples(np.clip(out, -1.0, 1.0))


def plan_log_line(utt_id: str, out_path: str, plan: AugmentPlan) -> str:
    return json.dumps({"id": utt_id, "output": out_path, "plan": plan.to_dict()}, sort_keys=True)
