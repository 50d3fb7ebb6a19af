"""Synthetic singing-tone corpus, distortion simulation and F0-statistics scaling."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .audio.filters import fir_filter, design_lowpass_fir
from .audio.wav import read_wav, write_wav
from .audio.waveform import Waveform
from .errors import InvalidParameterError, RateMismatchError
from .metrics import F0Track

PEAK = 0.9
STEM_SCALE_RANGE = (0.75, 1.25)
HIST_LOW_HZ, HIST_HIGH_HZ, HIST_BINS_PER_OCTAVE = 50.0, 1600.0, 12


class AliasingRiskError(InvalidParameterError):
    pass


class NoVoicedFramesError(InvalidParameterError):
    pass


@dataclass(eq=False)
class F0Trajectory:
    base_hz: float
    vibrato_rate_hz: float
    vibrato_depth_semitones: float
    duration_s: float
    control_rate_hz: float
    samples: np.ndarray

    def at(self, times: np.ndarray) -> np.ndarray:
        """Closed-form f0 at arbitrary times in seconds."""
        t = np.asarray(times, dtype=np.float64)
        return self.base_hz * 2.0 ** (
            self.vibrato_depth_semitones / 12.0 * np.sin(2 * np.pi * self.vibrato_rate_hz * t)
        )

    def params(self) -> dict:
        return dict(
            base_hz=self.base_hz,
            vibrato_rate_hz=self.vibrato_rate_hz,
            vibrato_depth_semitones=self.vibrato_depth_semitones,
            duration_s=self.duration_s,
            control_rate_hz=self.control_rate_hz,
        )


def vibrato_f0(
    base_hz: float,
    rate_hz: float,
    depth_semitones: float,
    duration_s: float,
    control_rate_hz: float = 1000.0,
) -> F0Trajectory:
    """Sinusoidal vibrato in the log-frequency domain, sampled at ``control_rate_hz``."""
    if base_hz <= 0:
        raise InvalidParameterError("base_hz must be positive")
    if depth_semitones < 0:
        raise InvalidParameterError("vibrato depth must be non-negative")
    traj = F0Trajectory(base_hz, rate_hz, depth_semitones, duration_s, control_rate_hz, np.empty(0))
    n = int(round(duration_s * control_rate_hz))
    traj.samples = traj.at(np.arange(n) / control_rate_hz)
    return traj


def harmonic_amplitudes(n_harmonics: int, rolloff_db_per_octave: float) -> np.ndarray:
    h = np.arange(1, n_harmonics + 1)
    return 10.0 ** (-rolloff_db_per_octave * np.log2(h) / 20.0)


def synth_harmonic(traj: F0Trajectory, n_harmonics: int, amp_rolloff_db_per_octave: float, fs: int) -> Waveform:
    """Additive synthesis with phase-continuous harmonics following ``traj``; peak 0.9."""
    n = int(round(traj.duration_s * fs))
    if n == 0 or len(traj.samples) == 0:
        return Waveform(np.zeros(0), fs)
    if n_harmonics * traj.samples.max() >= fs / 2:
        raise AliasingRiskError(f"harmonic {n_harmonics} of {traj.samples.max():.1f} Hz exceeds Nyquist")
    control_t = np.arange(len(traj.samples)) / traj.control_rate_hz
    f0 = np.interp(np.arange(n) / fs, control_t, traj.samples)
    phase = 2 * np.pi * np.cumsum(f0) / fs
    amps = harmonic_amplitudes(n_harmonics, amp_rolloff_db_per_octave)
    x = np.zeros(n)
    for h, a in enumerate(amps, start=1):
        x += a * np.sin(h * phase)
    peak = np.max(np.abs(x))
    return Waveform(x * (PEAK / peak) if peak > 0 else x, fs)


def truth_track(traj: F0Trajectory, n_samples: int, fs: int, frame: int, hop: int) -> F0Track:
    """Ground-truth F0 at the centres of the analysis frames used by :func:`estimate_f0`."""
    n_frames = max(0, 1 + (n_samples - frame) // hop)
    centres = (np.arange(n_frames) * hop + frame / 2) / fs
    f0 = traj.at(centres)
    return F0Track(f0, np.ones(n_frames, dtype=bool), hop, frame)


# -- distortion -----------------------------------------------------------------------------------


def apply_distortion(
    x: Waveform,
    rir: Waveform,
    stems: Sequence[Waveform] = (),
    stem_scales: Sequence[float] = (),
    gamma: float = 1.0,
) -> Waveform:
    """``gamma * (x * rir) + (1 - gamma) * x + sum(scale_j * stem_j)``, truncated to ``len(x)``."""
    if not 0 <= gamma <= 1:
        raise InvalidParameterError("gamma must lie in [0, 1]")
    if len(stems) != len(stem_scales):
        raise InvalidParameterError("one scale per stem")
    if any(s <= 0 for s in stem_scales):
        raise InvalidParameterError("stem scales must be positive")
    for w in (rir, *stems):
        if w.sample_rate != x.sample_rate:
            raise RateMismatchError(f"{w.sample_rate} Hz signal mixed into {x.sample_rate} Hz")
    n = len(x)
    wet = fftconvolve(x.samples, rir.samples)[:n] if gamma > 0 else np.zeros(n)
    y = gamma * wet + (1.0 - gamma) * x.samples
    for stem, scale in zip(stems, stem_scales):
        m = min(n, len(stem))
        y[:m] += scale * stem.samples[:m]
    return x.with_samples(y)


def synthetic_rir(fs: int, rng: np.random.Generator, t60: float = 0.4) -> Waveform:
    """Exponentially decaying white noise (-60 dB at ``t60``) after a unit direct path."""
    n = max(1, int(round(t60 * fs)))
    t = np.arange(n) / fs
    tail = rng.standard_normal(n) * 10.0 ** (-3.0 * t / t60)
    tail *= 0.5 / np.sqrt(np.sum(tail**2))
    tail[0] = 1.0
    return Waveform(tail, fs)


def synthetic_stem(fs: int, n: int, rng: np.random.Generator, level: float = 0.2) -> Waveform:
    """Band-limited sawtooth triad plus lowpassed noise bursts."""
    t = np.arange(n) / fs
    root = 110.0 * 2 ** rng.uniform(0, 2)
    y = np.zeros(n)
    for ratio in (1.0, 2 ** (4 / 12), 2 ** (7 / 12)):
        f = root * ratio
        for h in range(1, int((0.45 * fs) // f) + 1):
            y += np.sin(2 * np.pi * h * f * t) / h
    noise = fir_filter(rng.standard_normal(n), design_lowpass_fir(0.2 * fs, 0.05 * fs, 40, fs).taps)
    gate = np.zeros(n)
    for _ in range(max(1, int(n / fs * 4))):
        start = rng.integers(0, max(1, n - fs // 10))
        gate[start : start + fs // 10] = 1.0
    y = y / max(np.max(np.abs(y)), 1e-12) + 0.5 * gate * noise / max(np.max(np.abs(noise)), 1e-12)
    return Waveform(level * y / max(np.max(np.abs(y)), 1e-12), fs)


# -- singer statistics ---------------------------------------------------------------------------------


def _hist_edges() -> np.ndarray:
    n_bins = int(round(np.log2(HIST_HIGH_HZ / HIST_LOW_HZ) * HIST_BINS_PER_OCTAVE))
    return np.linspace(np.log2(HIST_LOW_HZ), np.log2(HIST_HIGH_HZ), n_bins + 1)


@dataclass(eq=False)
class SingerStats:
    mean_f0_hz: float
    std_log_f0: float
    histogram: np.ndarray
    bin_edges_log2: np.ndarray = field(default_factory=_hist_edges)


def compute_singer_stats(tracks: Iterable[F0Track]) -> SingerStats:
    """Mean F0 over all voiced frames and a semitone histogram of log2 F0."""
    voiced = np.concatenate([np.asarray(t.f0_hz)[np.asarray(t.voiced)] for t in tracks] or [np.empty(0)])
    if voiced.size == 0:
        raise NoVoicedFramesError("no voiced frames in any track")
    edges = _hist_edges()
    logs = np.clip(np.log2(voiced), edges[0], edges[-1])
    counts, _ = np.histogram(logs, bins=edges)
    return SingerStats(float(voiced.mean()), float(np.std(np.log(voiced))), counts / counts.sum(), edges)


def pitch_scale(src: SingerStats, trg: SingerStats, mode: str = "inference", rng: np.random.Generator | None = None) -> float:
    """F0 scale factor taking the source singer's mean F0 to the target's.

    ``"train"`` mode multiplies the exact ratio by ``2**u`` with ``u``
    uniform in one semitone either side.
    """
    ratio = trg.mean_f0_hz / src.mean_f0_hz
    if mode == "inference":
        return ratio
    if mode == "train":
        if rng is None:
            raise InvalidParameterError("train mode needs an rng")
        return ratio * 2.0 ** rng.uniform(-1 / 12, 1 / 12)
    raise InvalidParameterError(f"unknown mode {mode!r}")


# -- corpus generation ------------------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    n_utterances: int = 200
    n_heldout: int = 20
    duration_s: float = 2.0
    sample_rate: int = 8000
    f0_range_hz: tuple = (100.0, 400.0)
    vibrato_rate_hz: tuple = (5.0, 7.0)
    vibrato_depth_semitones: tuple = (0.0, 1.0)
    rolloff_db_per_octave: tuple = (4.0, 8.0)
    max_harmonics: int = 16
    distort: bool = False
    t60_s: float = 0.4
    n_stems: int = 2

    def __post_init__(self):
        if self.n_utterances < 1 or self.n_heldout < 0:
            raise InvalidParameterError("need at least one utterance and a non-negative held-out count")
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise InvalidParameterError("duration and sample rate must be positive")
        lo, hi = self.f0_range_hz
        if not 0 < lo <= hi or hi * 2 ** (max(self.vibrato_depth_semitones) / 12) >= self.sample_rate / 2:
            raise InvalidParameterError("f0 range must be positive and below Nyquist")
        if self.max_harmonics < 1 or self.n_stems < 0 or self.t60_s <= 0:
            raise InvalidParameterError("max_harmonics, n_stems and t60_s out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidParameterError(f"unknown corpus keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def utterance_seed(seed: int, index: int, split: int = 0) -> int:
    """Per-utterance seed; ``split`` 0 is training, 1 is held out."""
    key = [seed, index] if split == 0 else [seed, index, split]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def make_utterance(cfg: CorpusConfig, seed: int) -> tuple[Waveform, F0Trajectory, dict]:
    rng = np.random.default_rng(seed)
    lo, hi = cfg.f0_range_hz
    base = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    rate = float(rng.uniform(*cfg.vibrato_rate_hz))
    depth = float(rng.uniform(*cfg.vibrato_depth_semitones))
    rolloff = float(rng.uniform(*cfg.rolloff_db_per_octave))
    traj = vibrato_f0(base, rate, depth, cfg.duration_s)
    fmax = base * 2 ** (depth / 12)
    n_harm = int(min(cfg.max_harmonics, np.ceil(0.5 * cfg.sample_rate / fmax) - 1))
    x = synth_harmonic(traj, n_harm, rolloff, cfg.sample_rate)
    record = dict(seed=seed, f0=traj.params(), n_harmonics=n_harm, rolloff_db_per_octave=rolloff)
    if cfg.distort:
        gamma = float(rng.uniform(0, 1))
        scales = [float(s) for s in rng.uniform(*STEM_SCALE_RANGE, size=cfg.n_stems)]
        rir = synthetic_rir(cfg.sample_rate, rng, cfg.t60_s)
        stems = [synthetic_stem(cfg.sample_rate, len(x), rng) for _ in scales]
        record["distortion"] = dict(gamma=gamma, t60_s=cfg.t60_s, stem_scales=scales)
        record["_distorted"] = apply_distortion(x, rir, stems, scales, gamma)
    else:
        record["distortion"] = None
    return x, traj, record


def _write_split(cfg: CorpusConfig, out: Path, seed: int, split: int, count: int, threads: int) -> None:
    out.mkdir(parents=True, exist_ok=True)

    def one(i):
        x, _, rec = make_utterance(cfg, utterance_seed(seed, i, split))
        rec = {"file": f"utt{i:04d}.wav", **rec}
        write_wav(out / rec["file"], x, "float32")
        distorted = rec.pop("_distorted", None)
        if distorted is not None:
            (out / "distorted").mkdir(exist_ok=True)
            rec["distorted_file"] = f"distorted/utt{i:04d}.wav"
            write_wav(out / rec["distorted_file"], distorted, "float32")
        return rec

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(one, range(count)))
    else:
        records = [one(i) for i in range(count)]
    tmp = out / "manifest.jsonl.tmp"
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, out / "manifest.jsonl")


def make_corpus(cfg: CorpusConfig, out_dir: str | os.PathLike, seed: int, threads: int = 1) -> list[dict]:
    """Write ``utt0000.wav ...`` plus ``manifest.jsonl`` (one JSON record per line).

    Held-out utterances go to ``heldout/`` with their own manifest. Each
    manifest is written last, to a temporary name then renamed, so a
    failed run never leaves a partial manifest.
    """
    out = Path(out_dir)
    _write_split(cfg, out, seed, 0, cfg.n_utterances, threads)
    if cfg.n_heldout:
        _write_split(cfg, out / "heldout", seed, 1, cfg.n_heldout, threads)
    return read_manifest(out)


def read_manifest(corpus_dir: str | os.PathLike) -> list[dict]:
    with open(Path(corpus_dir) / "manifest.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_corpus(corpus_dir: str | os.PathLike) -> list[tuple[Waveform, dict]]:
    root = Path(corpus_dir)
    return [(read_wav(root / rec["file"]), rec) for rec in read_manifest(root)]


def trajectory_from_record(rec: dict) -> F0Trajectory:
    p = rec["f0"]
    return vibrato_f0(p["base_hz"], p["vibrato_rate_hz"], p["vibrato_depth_semitones"], p["duration_s"], p["control_rate_hz"])
