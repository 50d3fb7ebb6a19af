"""Objective evaluation: F0 tracking, PMAE, VDE, MR-STFT, MCD and real-time factor."""
from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.fft import dct

from .audio.spectral import MelSpectrogram, StftConfig, hann, log_mel
from .audio.waveform import Waveform
from .errors import InvalidParameterError, LengthMismatchError, RateMismatchError

MR_STFT_RESOLUTIONS = ((512, 50, 240), (1024, 120, 600), (2048, 240, 1200))  # (fft, hop, win)
MAG_FLOOR = 1e-7
MCD_COEFFS = slice(1, 14)
MCD_SCALE = 10.0 / np.log(10.0) * np.sqrt(2.0)


class FrameTooShortError(InvalidParameterError):
    pass


@dataclass(eq=False)
class F0Track:
    f0_hz: np.ndarray  # 0 where unvoiced
    voiced: np.ndarray
    hop: int
    frame: int

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.f0_hz.shape != self.voiced.shape or self.f0_hz.ndim != 1:
            raise LengthMismatchError("f0 and voicing flags must be equal-length vectors")
        self.f0_hz = np.where(self.voiced, self.f0_hz, 0.0)
        if np.any(self.f0_hz[self.voiced] <= 0):
            raise InvalidParameterError("voiced frames need a positive f0")

    def __len__(self) -> int:
        return len(self.f0_hz)


# -- F0 estimation ------------------------------------------------------------------------------


def _frames(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    n = 0 if len(x) < frame else 1 + (len(x) - frame) // hop
    if n == 0:
        return np.zeros((0, frame))
    return np.lib.stride_tricks.sliding_window_view(x, frame)[::hop][:n]


def cmnd(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """Cumulative-mean-normalised difference over lags ``0..tau_max``.

    The difference sum runs over a fixed window of ``frame - tau_max``
    samples so every lag compares the same number of products.
    """
    n_frames, frame = frames.shape
    w = frame - tau_max
    size = 1 << int(np.ceil(np.log2(frame + w)))
    head = frames[:, :w]
    corr = np.fft.irfft(np.conj(np.fft.rfft(head, size)) * np.fft.rfft(frames, size), size)[:, : tau_max + 1]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(tau_max + 1)
    energy_tau = sq[:, lags + w] - sq[:, lags]
    d = np.maximum(sq[:, w : w + 1] + energy_tau - 2 * corr, 0.0)
    d[:, 0] = 0.0
    out = np.ones_like(d)
    running = np.cumsum(d[:, 1:], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[:, 1:] = np.where(running > 0, d[:, 1:] * lags[1:] / running, 1.0)
    return out


def estimate_f0(
    x: Waveform,
    frame: int,
    hop: int,
    fmin: float = 60.0,
    fmax: float = 1000.0,
    threshold: float = 0.2,
) -> F0Track:
    """YIN-style tracker over non-centred frames (frame ``i`` starts at ``i * hop``).

    A frame is voiced when the normalised difference dips below
    ``threshold`` somewhere in the lag range ``[fs/fmax, fs/fmin]``; the
    first dip is refined to its local minimum and then by a parabola.
    """
    fs = x.sample_rate
    if fmin < 30:
        raise InvalidParameterError("fmin must be at least 30 Hz")
    if not fmin < fmax <= fs / 2:
        raise InvalidParameterError("need fmin < fmax <= fs/2")
    tau_min = max(2, int(np.floor(fs / fmax)))
    tau_max = int(np.ceil(fs / fmin))
    if frame < 2 * tau_max:
        raise FrameTooShortError(f"frame of {frame} samples holds fewer than two periods of {fmin} Hz")
    frames = _frames(x.samples, frame, hop)
    n = len(frames)
    f0 = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    if n == 0:
        return F0Track(f0, voiced, hop, frame)
    dn = cmnd(frames, tau_max + 1)
    silent = np.sum(frames**2, axis=1) < 1e-10 * frame
    for i in np.flatnonzero(~silent):
        row = dn[i]
        below = np.flatnonzero(row[tau_min : tau_max + 1] < threshold)
        if below.size == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 <= tau_max and row[tau + 1] < row[tau]:
            tau += 1
        a, b, c = row[tau - 1], row[tau], row[tau + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom > 0 else 0.0
        hz = fs / (tau + shift)
        if fmin <= hz <= fmax:
            f0[i], voiced[i] = hz, True
    return F0Track(f0, voiced, hop, frame)


# -- pitch metrics --------------------------------------------------------------------------------


def _check_tracks(ref: F0Track, hyp: F0Track) -> None:
    if len(ref) != len(hyp):
        raise LengthMismatchError(f"{len(ref)} vs {len(hyp)} frames")


def pmae(ref: F0Track, hyp: F0Track) -> float:
    """Mean absolute F0 difference over jointly voiced frames; NaN if there are none."""
    _check_tracks(ref, hyp)
    both = ref.voiced & hyp.voiced
    if not both.any():
        return float("nan")
    return float(np.mean(np.abs(ref.f0_hz[both] - hyp.f0_hz[both])))


def vde(ref: F0Track, hyp: F0Track) -> float:
    """Fraction of frames whose voicing flags disagree."""
    _check_tracks(ref, hyp)
    if len(ref) == 0:
        return float("nan")
    return float(np.mean(ref.voiced != hyp.voiced))


# -- spectral distances ---------------------------------------------------------------------------


def _check_pair(ref: Waveform, hyp: Waveform) -> None:
    if ref.sample_rate != hyp.sample_rate:
        raise RateMismatchError(f"{ref.sample_rate} vs {hyp.sample_rate} Hz")
    if len(ref) != len(hyp):
        raise LengthMismatchError(f"{len(ref)} vs {len(hyp)} samples")


def stft_magnitude(x: np.ndarray, fft: int, hop: int, win: int) -> np.ndarray:
    """Centre-padded magnitude STFT with a length-``win`` Hann window zero-padded to ``fft``."""
    window = np.zeros(fft)
    start = (fft - win) // 2
    window[start : start + win] = hann(win)
    padded = np.pad(x, fft // 2)
    frames = _frames(padded, fft, hop)[: 1 + len(x) // hop]
    return np.abs(np.fft.rfft(frames * window, axis=-1))


def spectral_convergence(ref_mag: np.ndarray, hyp_mag: np.ndarray) -> float:
    """``||ref - hyp||_F / ||ref||_F``; normalised by the reference, so not symmetric."""
    num = np.linalg.norm(ref_mag - hyp_mag)
    if num == 0:
        return 0.0
    return float(num / np.linalg.norm(ref_mag))


def log_magnitude_l1(ref_mag: np.ndarray, hyp_mag: np.ndarray) -> float:
    return float(np.mean(np.abs(np.log(np.maximum(ref_mag, MAG_FLOOR)) - np.log(np.maximum(hyp_mag, MAG_FLOOR)))))


def mr_stft(ref: Waveform, hyp: Waveform, resolutions=MR_STFT_RESOLUTIONS) -> float:
    """Spectral convergence plus log-magnitude L1, averaged over resolutions."""
    _check_pair(ref, hyp)
    total = 0.0
    for fft, hop, win in resolutions:
        r = stft_magnitude(ref.samples, fft, hop, win)
        h = stft_magnitude(hyp.samples, fft, hop, win)
        total += spectral_convergence(r, h) + log_magnitude_l1(r, h)
    return total / len(resolutions)


def mel_cepstrum(x: Waveform, cfg: StftConfig, n_mels: int = 40) -> np.ndarray:
    """Orthonormal DCT-II of the natural-log mel spectrum, one row per frame."""
    return dct(log_mel(x, cfg, n_mels=n_mels).values, type=2, norm="ortho", axis=-1)


def default_mcd_stft(sample_rate: int) -> StftConfig:
    # ~64 ms window, quarter hop, at any rate.
    fft = 1 << int(round(np.log2(0.064 * sample_rate)))
    return StftConfig(fft_size=fft, hop=fft // 4)


def mcd(ref: Waveform, hyp: Waveform, cfg: StftConfig | None = None, n_mels: int = 40) -> float:
    """Mel cepstral distortion in dB over coefficients 1..13."""
    _check_pair(ref, hyp)
    cfg = cfg or default_mcd_stft(ref.sample_rate)
    diff = mel_cepstrum(ref, cfg, n_mels)[:, MCD_COEFFS] - mel_cepstrum(hyp, cfg, n_mels)[:, MCD_COEFFS]
    return float(MCD_SCALE * np.mean(np.sqrt(np.sum(diff**2, axis=1))))


# -- speed ----------------------------------------------------------------------------------------------


def rtf(generate_fn: Callable[[MelSpectrogram], object], mel: MelSpectrogram) -> float:
    """Wall-clock generation time divided by the audio duration ``mel`` describes.

    Meaningful only without concurrent load on the machine.
    """
    duration = mel.n_frames * mel.hop_samples / mel.sample_rate
    if duration <= 0:
        raise InvalidParameterError("mel describes no audio")
    start = time.perf_counter()
    generate_fn(mel)
    elapsed = time.perf_counter() - start
    return max(elapsed, np.finfo(float).tiny) / duration


def environment_metadata() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": os.cpu_count(),
    }
