"""Audio clips to fixed-shape MFCC feature maps."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.fft import dct, rfft
from scipy.io import wavfile


class AudioError(ValueError):
    """Raised for unusable audio input."""


@dataclass
class AudioClip:
    samples: np.ndarray  # [N] or [N, channels]
    sample_rate: int
    label: int = -1
    clip_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise AudioError(f"clip {self.clip_id!r}: sample rate must be positive")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass
class FeatureMap:
    coefficients: np.ndarray  # [n_mfcc, frames]
    clip_id: str = ""
    label: int = -1

    @property
    def frame_count(self) -> int:
        return self.coefficients.shape[1]


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    target_seconds: float = 3.0
    window_ms: float = 30.0
    hop_ms: float = 10.0
    n_mels: int = 40
    n_mfcc: int = 40
    fmin: float = 20.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    @property
    def window_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        return 1 << (self.window_length - 1).bit_length()

    @property
    def target_samples(self) -> int:
        return int(round(self.sample_rate * self.target_seconds))

    @property
    def frame_count(self) -> int:
        return 1 + (self.target_samples - self.window_length) // self.hop_length

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- WAV input/output --------------------------------------------------------

def read_wav(path, label: int = -1, clip_id: str | None = None) -> AudioClip:
    """Read 16/32-bit PCM or 32-bit float WAV, scaled to [-1, 1]."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise AudioError(f"cannot read WAV {path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV sample type {data.dtype} in {path}")
    if samples.ndim == 2 and samples.shape[1] > 2:
        raise AudioError(f"{path}: {samples.shape[1]} channels; only mono or stereo supported")
    return AudioClip(samples, int(rate), label, clip_id if clip_id is not None else path.stem)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(Path(path), sample_rate, pcm)


# -- clip normalisation ------------------------------------------------------

def _resample(x: np.ndarray, rate: int, target_rate: int) -> np.ndarray:
    if rate == target_rate:
        return x
    if target_rate < rate:
        # anti-alias low-pass at the new Nyquist before interpolating
        taps = signal.firwin(101, 0.5 * target_rate, fs=rate)
        x = np.convolve(x, taps, mode="same")
    n_out = int(round(len(x) * target_rate / rate))
    t_out = np.arange(n_out) / target_rate
    t_in = np.arange(len(x)) / rate
    return np.interp(t_out, t_in, x)


def normalize_clip(clip: AudioClip, target_rate: int = 16000, target_seconds: float = 3.0) -> AudioClip:
    """Mono mix, resample, then truncate or zero-pad to ``target_seconds``."""
    x = clip.samples
    if x.size == 0 or x.shape[0] == 0:
        raise AudioError(f"clip {clip.clip_id!r} is empty")
    if x.ndim == 2:
        x = x.mean(axis=1)
    x = _resample(x, clip.sample_rate, target_rate)
    n = int(round(target_rate * target_seconds))
    if len(x) >= n:
        x = x[:n]
    else:
        x = np.concatenate([x, np.zeros(n - len(x))])
    return AudioClip(x, target_rate, clip.label, clip.clip_id)


# -- MFCC --------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: FrontendConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(config: FrontendConfig) -> np.ndarray:
    """Peak-normalised triangular filters, shape [n_mels, n_fft // 2 + 1]."""
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    bank = np.zeros((config.n_mels, freqs.size))
    for m in range(config.n_mels):
        lo, mid, hi = edges[m:m + 3]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def _frames(x: np.ndarray, config: FrontendConfig) -> np.ndarray:
    win, hop = config.window_length, config.hop_length
    if len(x) < win:
        raise AudioError(f"clip has {len(x)} samples, shorter than one {win}-sample frame")
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop]


def mel_energies(clip: AudioClip, config: FrontendConfig) -> np.ndarray:
    """Mel filterbank energies [n_mels, frames] before the log (debug tap)."""
    x = clip.samples if clip.samples.ndim == 1 else clip.samples.mean(axis=1)
    frames = _frames(x, config) * signal.get_window("hann", config.window_length)
    power = np.abs(rfft(frames, n=config.n_fft, axis=1)) ** 2
    return (power @ mel_filterbank(config).T).T


def extract_mfcc(clip: AudioClip, config: FrontendConfig = FrontendConfig()) -> FeatureMap:
    """Orthonormal DCT-II of log mel energies; returns [n_mfcc, frames]."""
    log_mel = np.log(mel_energies(clip, config) + config.log_floor)
    coeffs = dct(log_mel, type=2, norm="ortho", axis=0)[: config.n_mfcc]
    return FeatureMap(np.ascontiguousarray(coeffs), clip.clip_id, clip.label)


@dataclass
class Standardizer:
    """Per-coefficient z-scoring fitted on one set of feature maps."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    std: np.ndarray = field(default_factory=lambda: np.ones(0))

    @classmethod
    def fit(cls, maps: np.ndarray) -> "Standardizer":
        """``maps`` is [N, n_mfcc, frames]."""
        mean = maps.mean(axis=(0, 2))
        std = maps.std(axis=(0, 2))
        return cls(mean, np.where(std > 1e-12, std, 1.0))

    def apply(self, maps: np.ndarray) -> np.ndarray:
        return (maps - self.mean[None, :, None]) / self.std[None, :, None]
