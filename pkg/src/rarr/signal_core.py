"""Waveform-to-spectrogram front end shared by both sensing modalities.

Every function here is pure: inputs are never mutated and outputs are fresh
arrays, so the front end can be called from worker threads without locking.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

CANONICAL_SHAPE = (128, 256)
VARIANCE_FLOOR = 1e-8


class NormState(str, enum.Enum):
    RAW_MAGNITUDE = "raw_magnitude"
    LOG_NORMALIZED = "log_normalized"


def _frozen(a) -> np.ndarray:
    arr = np.array(a, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono signal with its sample rate.

    ``start_s`` is the offset of this waveform inside the recording it was cut
    from (0 for a full recording).
    """

    samples: np.ndarray
    sample_rate: float
    start_s: float = 0.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be > 0, got {self.sample_rate}")
        samples = np.asarray(self.samples)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if samples.flags.writeable:
            samples = _frozen(samples)
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class Spectrogram:
    values: np.ndarray
    norm_state: NormState = NormState.RAW_MAGNITUDE

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D (F, T), got shape {values.shape}")
        if values.flags.writeable:
            values = _frozen(values)
        object.__setattr__(self, "values", values)

    @property
    def F(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FrontEndConfig:
    """Per-modality front-end parameters.

    The signal is resampled to ``sample_rate`` (linear interpolation), cut into
    ``win_s`` windows every ``hop_s`` seconds, then transformed with an STFT of
    ``n_fft`` points and ``hop`` samples before canonicalization.
    """

    sample_rate: float
    n_fft: int
    hop: int
    win_s: float = 30.0
    hop_s: float = 15.0
    shape: tuple[int, int] = field(default=CANONICAL_SHAPE)
    resample_method: str = "linear"


NEAR_SURFACE_FRONT_END = FrontEndConfig(sample_rate=16000.0, n_fft=1024, hop=512)
ON_SURFACE_FRONT_END = FrontEndConfig(sample_rate=512.0, n_fft=128, hop=32)


def window_starts(n_samples: int, win_len: int, hop_len: int) -> list[int]:
    """Start indices of every full window; the trailing remainder is dropped."""
    if win_len <= 0 or hop_len <= 0:
        raise ValueError("window and hop lengths must be positive")
    if hop_len > win_len:
        raise ValueError(f"hop ({hop_len}) must not exceed the window ({win_len})")
    if n_samples < win_len:
        return []
    return list(range(0, n_samples - win_len + 1, hop_len))


def window(source: Waveform, win_s: float, hop_s: float) -> list[Waveform]:
    """Cut ``source`` into overlapping fixed-length windows.

    Returns ``floor((duration - win_s) / hop_s) + 1`` windows, or an empty list
    when the source is shorter than one window. Invalid window/hop arguments
    raise ``ValueError``.
    """
    if not (win_s > 0 and hop_s > 0):
        raise ValueError(f"win_s and hop_s must be positive, got {win_s}, {hop_s}")
    if hop_s > win_s:
        raise ValueError(f"hop_s ({hop_s}) must not exceed win_s ({win_s})")
    sr = source.sample_rate
    win_len = int(round(win_s * sr))
    hop_len = int(round(hop_s * sr))
    if win_len < 1 or hop_len < 1:
        raise ValueError("window or hop is shorter than one sample")
    return [
        Waveform(source.samples[s : s + win_len], sr, start_s=source.start_s + s / sr)
        for s in window_starts(len(source.samples), win_len, hop_len)
    ]


def resample(w: Waveform, target_rate: float) -> Waveform:
    """Linear-interpolation resampler; duration is preserved to one sample."""
    if not target_rate > 0:
        raise ValueError(f"target_rate must be > 0, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples, w.sample_rate, w.start_s)
    n_in = len(w.samples)
    n_out = max(1, int(round(n_in * target_rate / w.sample_rate)))
    t_in = np.arange(n_in) / w.sample_rate
    t_out = np.arange(n_out) / target_rate
    out = np.interp(t_out, t_in, w.samples.astype(np.float64))
    return Waveform(out, target_rate, w.start_s)


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(w: Waveform, n_fft: int, hop: int) -> Spectrogram:
    """Hann-windowed STFT magnitude with ``n_fft // 2 + 1`` bins.

    Frames start every ``hop`` samples with no centering padding, so frame ``k``
    covers samples ``[k * hop, k * hop + n_fft)``.
    """
    if n_fft < 1 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise ValueError(f"hop must be in (0, n_fft], got {hop}")
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < n_fft:
        raise ValueError(
            f"signal has {len(x)} samples but n_fft is {n_fft}; pad or reject the clip"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop] * hann(n_fft)
    mag = np.abs(np.fft.rfft(frames, axis=1)).T
    return Spectrogram(mag, NormState.RAW_MAGNITUDE)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation matrix with aligned end points."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, n_in - 1, n_out)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows = _interp_matrix(grid.shape[0], shape[0])
    cols = _interp_matrix(grid.shape[1], shape[1])
    return rows @ grid @ cols.T


def canonicalize(s: Spectrogram, shape: tuple[int, int] = CANONICAL_SHAPE) -> Spectrogram:
    """log(1 + x), bilinear resize to ``shape``, then per-clip standardization."""
    if s.norm_state is not NormState.RAW_MAGNITUDE:
        raise ValueError("canonicalize expects a raw magnitude spectrogram")
    grid = bilinear_resize(np.log1p(s.values.astype(np.float64)), shape)
    grid = grid - grid.mean()
    grid = grid / np.sqrt(max(grid.var(), VARIANCE_FLOOR))
    return Spectrogram(grid.astype(np.float32), NormState.LOG_NORMALIZED)


def featurize(w: Waveform, fe: FrontEndConfig) -> np.ndarray:
    """Full front end for one clip; returns the canonical float32 grid."""
    spec = stft(resample(w, fe.sample_rate), fe.n_fft, fe.hop)
    return canonicalize(spec, tuple(fe.shape)).values


def read_wav(path: str | Path) -> Waveform:
    """Read a PCM/float WAV file as mono float64 in [-1, 1] (integer formats)."""
    rate, data = wavfile.read(str(path))
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        if info.min == 0:  # unsigned 8-bit
            data = (data.astype(np.float64) - (info.max + 1) / 2) / ((info.max + 1) / 2)
        else:
            data = data.astype(np.float64) / -float(info.min)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return Waveform(data, float(rate))


def write_wav(path: str | Path, w: Waveform, dtype=np.int16) -> None:
    x = np.asarray(w.samples, dtype=np.float64)
    if np.dtype(dtype) == np.int16:
        data = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(dtype)
    rate = int(round(w.sample_rate))
    wavfile.write(str(path), rate, data)
