"""Speech frontend: WAV loading, log-Mel filterbanks, global MVN and
SpecAugment masking."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import read_matrix, write_matrix
from .errors import (
    EmptyInputError,
    FormatError,
    InputTooShortError,
    PolicyError,
    ShapeError,
    UnsupportedError,
)

FRAME_LENGTH_MS = 25
FRAME_SHIFT_MS = 10
LOG_FLOOR = 1e-10
MVN_EPS = 1e-5

FEATURE_MAGIC = b"TCAF"
STATS_MAGIC = b"TCAS"


@dataclass
class AudioWave:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate}")


@dataclass
class MvnStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def n_mels(self) -> int:
        return int(self.mean.shape[0])


@dataclass(frozen=True)
class SpecAugmentPolicy:
    """Frequency/time masking policy; defaults follow the SM policy.

    ``time_mask_ratio`` caps each time mask at that fraction of the utterance
    length (the ``p`` bound of the SM policy). ``None`` disables the cap.
    """

    freq_mask_width: int = 15
    time_mask_width: int = 70
    n_freq_masks: int = 2
    n_time_masks: int = 2
    time_mask_ratio: float | None = 0.2
    fill_value: float = 0.0
    time_warp: bool = False

    def validate(self, n_mels: int) -> None:
        if self.time_warp:
            raise PolicyError("time warping is not supported")
        if min(self.freq_mask_width, self.time_mask_width) < 0:
            raise PolicyError("mask widths must be non-negative")
        if min(self.n_freq_masks, self.n_time_masks) < 0:
            raise PolicyError("mask counts must be non-negative")
        if self.freq_mask_width > n_mels:
            raise PolicyError(
                f"frequency mask width {self.freq_mask_width} exceeds {n_mels} mel bins"
            )
        if self.time_mask_ratio is not None and not 0.0 <= self.time_mask_ratio <= 1.0:
            raise PolicyError("time_mask_ratio must lie in [0, 1]")


def read_wav(path) -> AudioWave:
    """Read a PCM16 mono WAV file into samples scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            if channels != 1:
                raise UnsupportedError(f"{path}: {channels} channels, only mono supported")
            if width != 2:
                raise UnsupportedError(f"{path}: {8 * width}-bit samples, only PCM16 supported")
            data = wf.readframes(n_frames)
    except (wave.Error, EOFError, struct.error) as exc:
        # wave raises wave.Error for non-PCM encodings as well as broken headers
        if "unknown format" in str(exc):
            raise UnsupportedError(f"{path}: {exc}") from exc
        raise FormatError(f"{path}: malformed WAV ({exc})") from exc
    if len(data) != n_frames * 2:
        raise FormatError(
            f"{path}: data chunk truncated ({len(data)} of {n_frames * 2} bytes)"
        )
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return AudioWave(samples=samples, sample_rate=rate)


def write_wav(path, wave_: AudioWave) -> None:
    pcm = np.clip(np.round(np.asarray(wave_.samples) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(wave_.sample_rate)
        wf.writeframes(pcm.astype("<i2").tobytes())


def frame_params(sample_rate: int) -> tuple[int, int, int]:
    """Return (frame_length, hop, n_fft) in samples."""
    frame_len = sample_rate * FRAME_LENGTH_MS // 1000
    hop = sample_rate * FRAME_SHIFT_MS // 1000
    n_fft = 1 << (frame_len - 1).bit_length()
    return frame_len, hop, n_fft


def num_frames(n_samples: int, sample_rate: int = 16000) -> int:
    frame_len, hop, _ = frame_params(sample_rate)
    if n_samples < frame_len:
        raise InputTooShortError(
            f"{n_samples} samples is shorter than one {frame_len}-sample frame"
        )
    return (n_samples - frame_len) // hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters over 0 Hz..Nyquist, shape (n_fft//2+1, n_mels)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (bins[:, None] - lower) / (center - lower)
    falling = (upper - bins[:, None]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(wave_: AudioWave, n_mels: int = 80) -> np.ndarray:
    """Log-Mel filterbank energies, shape (n_frames, n_mels)."""
    x = np.asarray(wave_.samples, dtype=np.float64)
    frame_len, hop, n_fft = frame_params(wave_.sample_rate)
    n = num_frames(len(x), wave_.sample_rate)
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    window = np.hanning(frame_len + 1)[:-1]  # periodic Hann
    spectrum = np.fft.rfft(x[idx] * window, n=n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    energies = power @ mel_filterbank(n_mels, n_fft, wave_.sample_rate)
    return np.log(np.maximum(energies, LOG_FLOOR))


def mvn_fit(features) -> MvnStats:
    """Pooled per-dimension mean and population std over all frames."""
    features = list(features)
    if not features:
        raise EmptyInputError("cannot fit MVN statistics on an empty collection")
    dims = {f.shape[1] for f in features}
    if len(dims) != 1:
        raise ShapeError(f"feature matrices disagree on n_mels: {sorted(dims)}")
    frames = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=0)
    mean = frames.mean(axis=0)
    std = np.maximum(frames.std(axis=0), MVN_EPS)
    return MvnStats(mean=mean, std=std)


def mvn_apply(features: np.ndarray, stats: MvnStats) -> np.ndarray:
    if features.ndim != 2 or features.shape[1] != stats.n_mels:
        raise ShapeError(
            f"features of shape {features.shape} do not match {stats.n_mels}-dim stats"
        )
    return (features - stats.mean) / stats.std


def spec_augment(features: np.ndarray, policy: SpecAugmentPolicy, rng_seed: int) -> np.ndarray:
    """Apply frequency then time masks; the input array is left untouched."""
    n_frames, n_mels = features.shape
    policy.validate(n_mels)
    rng = np.random.default_rng(rng_seed)
    out = np.array(features, copy=True)
    for _ in range(policy.n_freq_masks):
        f = int(rng.integers(0, policy.freq_mask_width + 1))
        f0 = int(rng.integers(0, n_mels - f + 1))
        out[:, f0 : f0 + f] = policy.fill_value
    max_t = min(policy.time_mask_width, n_frames)
    if policy.time_mask_ratio is not None:
        max_t = min(max_t, int(policy.time_mask_ratio * n_frames))
    for _ in range(policy.n_time_masks):
        t = int(rng.integers(0, max_t + 1))
        t0 = int(rng.integers(0, n_frames - t + 1))
        out[t0 : t0 + t, :] = policy.fill_value
    return out


def save_features(path, features: np.ndarray) -> None:
    write_matrix(path, FEATURE_MAGIC, features)


def load_features(path) -> np.ndarray:
    return read_matrix(path, FEATURE_MAGIC)


def save_stats(path, stats: MvnStats) -> None:
    mean = np.asarray(stats.mean, dtype="<f4")
    std = np.asarray(stats.std, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(STATS_MAGIC)
        fh.write(struct.pack("<I", mean.shape[0]))
        fh.write(mean.tobytes())
        fh.write(std.tobytes())


def load_stats(path) -> MvnStats:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != STATS_MAGIC:
        raise FormatError(f"{path}: missing TCAS header")
    (n_mels,) = struct.unpack_from("<I", raw, 4)
    if len(raw) != 8 + 8 * n_mels:
        raise FormatError(f"{path}: expected {n_mels} means and stds")
    values = np.frombuffer(raw[8:], dtype="<f4").astype(np.float64)
    return MvnStats(mean=values[:n_mels].copy(), std=values[n_mels:].copy())
