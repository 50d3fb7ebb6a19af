"""Kaiser-window FIR design and integer-ratio resampling.

Every lowpass used by the resamplers and by the inference-time conditioning
filter comes from :func:`antialias_kernel`, so a given pair of rates always
maps to the same taps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import InvalidCutoffError, InvalidParameterError, NonIntegerRatioError
from .waveform import Waveform

# Anti-alias stage, as fractions of the lower of the two rates involved.
ANTIALIAS_CUTOFF = 0.45
ANTIALIAS_TRANSITION = 0.05
ANTIALIAS_ATTEN_DB = 60.0

_MAX_TAPS = 1 << 14


@dataclass(frozen=True, eq=False)
class FilterKernel:
    taps: np.ndarray
    nominal_cutoff_hz: float
    design_rate_hz: float
    transition_hz: float = 0.0
    stopband_atten_db: float = 0.0

    @property
    def delay(self) -> int:
        """Group delay in samples."""
        return (len(self.taps) - 1) // 2

    @classmethod
    def identity(cls, fs: float) -> "FilterKernel":
        return cls(np.ones(1), fs / 2, fs)


def kaiser_beta(atten_db: float) -> float:
    if atten_db > 50:
        return 0.1102 * (atten_db - 8.7)
    if atten_db > 21:
        return 0.5842 * (atten_db - 21) ** 0.4 + 0.07886 * (atten_db - 21)
    return 0.0


def kaiser_length(atten_db: float, transition_hz: float, fs: float) -> int:
    """Kaiser's length estimate, rounded up to the next odd count."""
    width = 2 * math.pi * transition_hz / fs
    n = int(math.ceil((atten_db - 7.95) / (2.285 * width))) + 1
    return n | 1


def _windowed_sinc(n_taps: int, cutoff_hz: float, fs: float, beta: float) -> np.ndarray:
    m = np.arange(n_taps) - (n_taps - 1) / 2
    fc = cutoff_hz / fs
    h = 2 * fc * np.sinc(2 * fc * m) * np.kaiser(n_taps, beta)
    h = h / h.sum()
    # exact symmetry, independent of rounding in np.sinc
    return 0.5 * (h + h[::-1])


def frequency_response_db(taps: np.ndarray, fs: float, n_points: int | None = None):
    """Magnitude response in dB on a dense grid from 0 to fs/2."""
    n = n_points or max(1 << 15, 1 << int(math.ceil(math.log2(16 * len(taps)))))
    mag = np.abs(np.fft.rfft(taps, n))
    freqs = np.fft.rfftfreq(n, 1 / fs)
    return freqs, 20 * np.log10(np.maximum(mag, 1e-300))


def _meets(taps, cutoff_hz, transition_hz, atten_db, fs) -> bool:
    freqs, resp = frequency_response_db(taps, fs)
    stop = freqs >= cutoff_hz + transition_hz / 2
    passband = freqs <= cutoff_hz - transition_hz / 2
    ripple_ok = not passband.any() or np.max(np.abs(resp[passband])) <= 0.5
    return bool(np.max(resp[stop]) <= -atten_db and ripple_ok)


@lru_cache(maxsize=64)
def _design(cutoff_hz: float, transition_hz: float, atten_db: float, fs: float) -> np.ndarray:
    beta = kaiser_beta(atten_db)
    n = kaiser_length(atten_db, transition_hz, fs)
    while True:
        taps = _windowed_sinc(n, cutoff_hz, fs, beta)
        if _meets(taps, cutoff_hz, transition_hz, atten_db, fs):
            taps.setflags(write=False)
            return taps
        n += 2
        if n > _MAX_TAPS:
            raise InvalidParameterError("filter specification needs too many taps")


def design_lowpass_fir(cutoff_hz: float, transition_hz: float, stopband_atten_db: float, fs: float) -> FilterKernel:
    """Linear-phase Kaiser-windowed-sinc lowpass.

    ``cutoff_hz`` is the centre of a transition band ``transition_hz`` wide.
    The tap count starts at Kaiser's estimate and grows until the measured
    response meets the stopband attenuation and 0.5 dB passband ripple.
    """
    if not 0 < cutoff_hz < fs / 2:
        raise InvalidCutoffError(f"cutoff {cutoff_hz} Hz outside (0, {fs / 2})")
    if transition_hz <= 0:
        raise InvalidParameterError("transition width must be positive")
    if stopband_atten_db < 40:
        raise InvalidParameterError("stopband attenuation must be at least 40 dB")
    if cutoff_hz + transition_hz / 2 >= fs / 2:
        raise InvalidCutoffError("stopband edge reaches the Nyquist frequency")
    taps = _design(float(cutoff_hz), float(transition_hz), float(stopband_atten_db), float(fs))
    return FilterKernel(taps, float(cutoff_hz), float(fs), float(transition_hz), float(stopband_atten_db))


def antialias_kernel(low_rate: float, design_rate: float) -> FilterKernel:
    """The shared anti-alias lowpass protecting ``low_rate``, run at ``design_rate``."""
    return design_lowpass_fir(
        ANTIALIAS_CUTOFF * low_rate, ANTIALIAS_TRANSITION * low_rate, ANTIALIAS_ATTEN_DB, design_rate
    )


def fir_filter(samples: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-phase application of a symmetric FIR along the last axis."""
    samples = np.asarray(samples)
    n = samples.shape[-1]
    d = (len(taps) - 1) // 2
    if samples.ndim == 1:
        return np.convolve(samples, taps)[d : d + n]
    flat = samples.reshape(-1, n)
    out = np.stack([np.convolve(row, taps)[d : d + n] for row in flat])
    return out.reshape(samples.shape)


def apply_fir(x: Waveform, h: FilterKernel) -> Waveform:
    return x.with_samples(fir_filter(x.samples, h.taps))


def _ratio(high: int, low: int) -> int:
    if low <= 0 or high % low:
        raise NonIntegerRatioError(f"{high} Hz is not an integer multiple of {low} Hz")
    return high // low


def decimate(samples: np.ndarray, src_rate: int, target_rate: int) -> np.ndarray:
    k = _ratio(src_rate, target_rate)
    if k == 1:
        return np.array(samples, copy=True)
    n = samples.shape[-1]
    y = fir_filter(samples, antialias_kernel(target_rate, src_rate).taps)
    return y[..., : (n // k) * k : k]


def interpolate(samples: np.ndarray, src_rate: int, target_rate: int) -> np.ndarray:
    k = _ratio(target_rate, src_rate)
    if k == 1:
        return np.array(samples, copy=True)
    stuffed = np.zeros(samples.shape[:-1] + (samples.shape[-1] * k,), dtype=samples.dtype)
    stuffed[..., ::k] = samples
    return k * fir_filter(stuffed, antialias_kernel(src_rate, target_rate).taps)


def downsample(x: Waveform, target_rate: int) -> Waveform:
    """Anti-alias filter then keep every k-th sample; output length is ``len(x) // k``."""
    return Waveform(decimate(x.samples, x.sample_rate, target_rate), target_rate)


def upsample(x: Waveform, target_rate: int) -> Waveform:
    """Zero-stuff by k and interpolate with the anti-alias lowpass of the source rate."""
    return Waveform(interpolate(x.samples, x.sample_rate, target_rate), target_rate)
