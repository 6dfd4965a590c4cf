"""Mono 16-bit PCM WAV I/O and windowed-sinc resampling."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass

import numpy as np

from lidkit.data import LidError

DEFAULT_RATE = 16000
KERNEL_HALF_WIDTH = 32
KAISER_BETA = 8.6
_CHUNK = 8192


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).ravel()
        if x.size == 0:
            raise LidError("audio buffer is empty")
        if not np.isfinite(x).all():
            raise LidError("audio buffer has non-finite samples")
        if not self.sample_rate > 0:
            raise LidError(f"sample rate must be positive, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples) -> AudioBuffer:
        return AudioBuffer(samples, self.sample_rate)


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def sinc_interpolate(x: np.ndarray, positions: np.ndarray, cutoff: float = 1.0,
                     half_width: int = KERNEL_HALF_WIDTH, beta: float = KAISER_BETA) -> np.ndarray:
    """Band-limited interpolation of ``x`` at fractional sample ``positions``.

    Uses a Kaiser-windowed sinc with ``cutoff`` as a fraction of the input
    Nyquist frequency (below 1 for anti-aliased decimation). Samples outside
    the signal are taken as zero.
    """
    x = np.asarray(x, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    width = int(math.ceil(half_width / cutoff))
    taps = np.arange(-width + 1, width + 1)
    out = np.empty(positions.size)
    padded = np.concatenate([np.zeros(width), x, np.zeros(width + 1)])
    norm_beta = np.i0(beta)
    for start in range(0, positions.size, _CHUNK):
        pos = positions[start:start + _CHUNK]
        base = np.floor(pos).astype(np.int64)
        idx = base[:, None] + taps[None, :]             # input sample indices
        t = pos[:, None] - idx                          # distance to each tap
        arg = np.clip(t / width, -1.0, 1.0)
        window = np.i0(beta * np.sqrt(1.0 - arg * arg)) / norm_beta
        kernel = cutoff * np.sinc(cutoff * t) * window
        out[start:start + _CHUNK] = (padded[idx + width] * kernel).sum(axis=1)
    return out


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    if rate_in == rate_out:
        return np.array(x, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n_out = int(round(x.size * rate_out / rate_in))
    if n_out < 1:
        raise LidError("resampled signal would be empty")
    positions = np.arange(n_out) * (rate_in / rate_out)
    return sinc_interpolate(x, positions, cutoff=min(1.0, rate_out / rate_in))


def read_wav(path, target_rate: int | None = DEFAULT_RATE) -> AudioBuffer:
    """Read 16-bit PCM WAV as floats in [-1, 1); channels are averaged.

    Audio at another rate is resampled to ``target_rate`` unless that is None.
    """
    try:
        with wave.open(str(path), "rb") as w:
            n_ch = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise LidError(f"{path}: not a readable WAV file ({e})") from None
    if width != 2:
        raise LidError(f"{path}: only 16-bit PCM is supported, got {8 * width}-bit")
    data = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    if data.size == 0:
        raise LidError(f"{path}: no audio samples")
    if n_ch > 1:
        data = data.reshape(-1, n_ch).mean(axis=1)
    if target_rate is not None and rate != target_rate:
        data = resample(data, rate, target_rate)
        rate = target_rate
    return AudioBuffer(data, rate)


def to_pcm16(samples) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.round(x * 32767.0).astype("<i2")


def write_wav(path, buf: AudioBuffer) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(buf.sample_rate))
        w.writeframes(to_pcm16(buf.samples).tobytes())
