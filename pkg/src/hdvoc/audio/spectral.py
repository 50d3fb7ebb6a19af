"""STFT and log-mel analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputTooShortError, InvalidBandRangeError, InvalidParameterError
from .waveform import Waveform

DEFAULT_LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 2048
    hop: int = 300
    window: str = "hann"
    center_padding: bool = True

    def __post_init__(self):
        if self.fft_size < 2 or self.fft_size & (self.fft_size - 1):
            raise InvalidParameterError("fft_size must be a power of two")
        if not 0 < self.hop <= self.fft_size:
            raise InvalidParameterError("hop must be in [1, fft_size]")
        if self.window != "hann":
            raise InvalidParameterError(f"unsupported window {self.window!r}")

    def n_frames(self, n_samples: int) -> int:
        if self.center_padding:
            return 1 + n_samples // self.hop
        return 1 + (n_samples - self.fft_size) // self.hop


@dataclass(eq=False)
class MelSpectrogram:
    values: np.ndarray  # (frames, n_mels), natural-log power
    n_mels: int
    hop_samples: int
    fft_size: int
    sample_rate: int
    log_floor: float = DEFAULT_LOG_FLOOR

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def trimmed(self, n_frames: int) -> "MelSpectrogram":
        return MelSpectrogram(
            self.values[:n_frames], self.n_mels, self.hop_samples, self.fft_size, self.sample_rate, self.log_floor
        )


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if cfg.center_padding:
        half = cfg.fft_size // 2
        x = np.pad(x, (half, half))
    elif len(x) < cfg.fft_size:
        raise InputTooShortError(f"need at least {cfg.fft_size} samples, got {len(x)}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.fft_size)[:: cfg.hop]
    return frames[: cfg.n_frames(len(samples))]


def stft_array(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    frames = frame_signal(samples, cfg)
    return np.fft.rfft(frames * hann(cfg.fft_size), axis=-1)


def stft(x: Waveform, cfg: StftConfig) -> np.ndarray:
    """Complex spectrogram of shape (frames, fft_size // 2 + 1).

    With ``center_padding`` frame ``j`` is centred on sample ``j * hop`` and
    the signal is zero-padded by ``fft_size // 2`` on both sides.
    """
    return stft_array(x.samples, cfg)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape (n_mels, fft_size // 2 + 1), peak weight 1."""
    fmax = sample_rate / 2 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise InvalidBandRangeError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got ({fmin}, {fmax})")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(fb.sum(axis=1) <= 0):
        raise InvalidBandRangeError("some mel bands contain no FFT bins; use a larger fft_size or fewer bands")
    return fb


def log_mel(
    x: Waveform,
    cfg: StftConfig,
    n_mels: int = 80,
    fmin: float = 0.0,
    fmax: float | None = None,
    log_floor: float = DEFAULT_LOG_FLOOR,
) -> MelSpectrogram:
    fb = mel_filterbank(x.sample_rate, cfg.fft_size, n_mels, fmin, fmax)
    power = np.abs(stft(x, cfg)) ** 2
    values = np.log(np.maximum(power @ fb.T, log_floor))
    return MelSpectrogram(values, n_mels, cfg.hop, cfg.fft_size, x.sample_rate, log_floor)
