"""Hierarchical diffusion vocoder: per-level training and cascaded generation.

Level 0 runs at the highest rate. Every level except the last is also
conditioned on the waveform of the level below, upsampled to its own rate.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .audio.filters import FilterKernel, antialias_kernel, decimate, fir_filter, interpolate
from .audio.spectral import DEFAULT_LOG_FLOOR, MelSpectrogram, StftConfig, log_mel
from .audio.waveform import Waveform
from .diffusion import (
    FAST_INFERENCE_BETAS,
    PRIOR_FLOOR,
    TRAIN_BETA_END,
    TRAIN_BETA_START,
    TRAIN_T,
    NoiseSchedule,
    align_steps,
    frame_prior,
    make_inference_schedule,
    make_training_schedule,
    posterior_step,
    weighted_loss,
    weighted_loss_grad,
)
from .errors import (
    ConfigError,
    EmptyCorpusError,
    InvalidParameterError,
    LengthMismatchError,
    RateMismatchError,
    UntrainedLevelError,
)
from .nn.epsnet import EpsilonNet, EpsilonNetConfig
from .nn.optim import DEFAULT_LEARNING_RATE, TrainState, adam_step

ABLATIONS = ("zero_mel", "zero_lower", "zero_both")


class RequiresHierarchyError(InvalidParameterError):
    pass


@dataclass(frozen=True)
class MelConfig:
    fft_size: int = 2048
    hop: int = 300
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = DEFAULT_LOG_FLOOR

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.fft_size, self.hop)

    def compute(self, x: Waveform) -> MelSpectrogram:
        return log_mel(x, self.stft, self.n_mels, self.fmin, self.fmax, self.log_floor)


def mel_features(mel: MelSpectrogram) -> np.ndarray:
    """Net input features: log-mel shifted and scaled so the log floor maps to 0."""
    lf = np.log(mel.log_floor)
    return ((mel.values - lf) / -lf).astype(np.float32)


@dataclass(frozen=True)
class FilterSpec:
    cutoff_hz: float
    transition_hz: float
    stopband_atten_db: float
    design_rate_hz: int


@dataclass(frozen=True)
class HierarchySpec:
    rates: tuple
    nets: tuple
    mel: MelConfig = MelConfig()
    prior_floor: float = PRIOR_FLOOR
    train_T: int = TRAIN_T
    train_beta_start: float = TRAIN_BETA_START
    train_beta_end: float = TRAIN_BETA_END
    inference_betas: tuple = FAST_INFERENCE_BETAS

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))
        object.__setattr__(self, "nets", tuple(self.nets))
        object.__setattr__(self, "inference_betas", tuple(self.inference_betas))
        rates, n = self.rates, len(self.rates)
        if n < 1:
            raise ConfigError("a hierarchy needs at least one level")
        if any(hi <= lo for hi, lo in zip(rates, rates[1:])):
            raise ConfigError(f"rates must be strictly decreasing: {rates}")
        if any(hi % lo for hi, lo in zip(rates, rates[1:])):
            raise ConfigError(f"adjacent rates must be integer multiples: {rates}")
        if len(self.nets) != n:
            raise ConfigError(f"{n} rates but {len(self.nets)} net configs")
        for i, cfg in enumerate(self.nets):
            if cfg.has_lower_conditioning != (i < n - 1):
                raise ConfigError(f"level {i}: only the lowest level may omit lower-rate conditioning")
            if cfg.n_mels != self.mel.n_mels:
                raise ConfigError(f"level {i}: net expects {cfg.n_mels} mel bands, mel config has {self.mel.n_mels}")
        for r in rates:
            if (self.mel.hop * r) % rates[0]:
                raise ConfigError(f"mel hop {self.mel.hop} does not divide evenly at {r} Hz")
        if self.mel.fft_size < self.mel.hop:
            raise ConfigError("mel fft_size must be at least the hop")

    @property
    def n_levels(self) -> int:
        return len(self.rates)

    def level_hop(self, level: int) -> int:
        """Samples per mel frame at ``level``, i.e. the mel hop over the decimation factor."""
        return self.mel.hop * self.rates[level] // self.rates[0]

    def train_schedule(self) -> NoiseSchedule:
        return make_training_schedule(self.train_T, self.train_beta_start, self.train_beta_end)

    def inference_schedule(self) -> NoiseSchedule:
        return make_inference_schedule(self.inference_betas)

    def resample_kernel(self, level: int) -> FilterKernel:
        """Lowpass shared by decimation from ``level`` and interpolation back to it."""
        return antialias_kernel(self.rates[level + 1], self.rates[level])

    def conditioner_kernel(self, level: int) -> FilterKernel:
        """Anti-alias filter applied to a generated lower-level waveform, at the lower rate."""
        return antialias_kernel(self.rates[level + 1], self.rates[level + 1])

    def filter_specs(self) -> list[FilterSpec]:
        out = []
        for i in range(self.n_levels - 1):
            k = self.conditioner_kernel(i)
            out.append(FilterSpec(k.nominal_cutoff_hz, k.transition_hz, k.stopband_atten_db, int(k.design_rate_hz)))
        return out

    def to_dict(self) -> dict:
        return {
            "rates": list(self.rates),
            "nets": [c.to_dict() for c in self.nets],
            "mel": asdict(self.mel),
            "prior_floor": self.prior_floor,
            "train_T": self.train_T,
            "train_beta_start": self.train_beta_start,
            "train_beta_end": self.train_beta_end,
            "inference_betas": list(self.inference_betas),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchySpec":
        d = dict(d)
        d["nets"] = tuple(EpsilonNetConfig.from_dict(c) for c in d["nets"])
        d["mel"] = MelConfig(**d.get("mel", {}))
        return cls(**d)


def make_spec(rates: Sequence[int], net: EpsilonNetConfig, mel: MelConfig, **kw) -> HierarchySpec:
    """Same net shape at every level, with lower conditioning switched on where required."""
    n = len(rates)
    nets = [EpsilonNetConfig(**{**net.to_dict(), "has_lower_conditioning": i < n - 1}) for i in range(n)]
    return HierarchySpec(tuple(rates), tuple(nets), mel, **kw)


FULL_MEL = MelConfig(fft_size=2048, hop=300, n_mels=80)
FULL_NET = EpsilonNetConfig(layers=30, blocks=3, residual_channels=64, step_embed_dim=128, step_hidden=512)
DESK_MEL = MelConfig(fft_size=1024, hop=100, n_mels=80, fmax=4000.0)
DESK_NET = EpsilonNetConfig(layers=8, blocks=2, residual_channels=32, step_embed_dim=128, step_hidden=128)


def hpg2_spec() -> HierarchySpec:
    return make_spec((24000, 6000), FULL_NET, FULL_MEL)


def hpg3_spec() -> HierarchySpec:
    return make_spec((24000, 12000, 6000), FULL_NET, FULL_MEL)


def desk_spec(rates: Sequence[int] = (8000, 2000), net: EpsilonNetConfig = DESK_NET) -> HierarchySpec:
    return make_spec(rates, net, DESK_MEL)


# -- conditioning ------------------------------------------------------------------------------------


def cascade_downsample(samples: np.ndarray, spec: HierarchySpec, level: int) -> np.ndarray:
    """Top-rate samples taken down to ``level`` through every intermediate rate."""
    x = samples
    for j in range(level):
        x = decimate(x, spec.rates[j], spec.rates[j + 1])
    return x


def training_conditioner(x0: np.ndarray, spec: HierarchySpec, level: int) -> np.ndarray:
    """Ground-truth lower-rate signal (filter, decimate) interpolated back to ``level``'s rate."""
    lo, hi = spec.rates[level + 1], spec.rates[level]
    return interpolate(decimate(x0, hi, lo), lo, hi)


def inference_conditioner(x_lower: np.ndarray, spec: HierarchySpec, level: int) -> np.ndarray:
    """Generated lower-rate signal, anti-alias filtered at its own rate, then interpolated."""
    lo, hi = spec.rates[level + 1], spec.rates[level]
    filtered = fir_filter(x_lower, spec.conditioner_kernel(level).taps)
    return interpolate(filtered, lo, hi)


@dataclass(eq=False)
class TrainingExample:
    x0: np.ndarray
    lower: np.ndarray | None
    mel: MelSpectrogram


def _fit_to_frames(x: Waveform, spec: HierarchySpec) -> tuple[np.ndarray, MelSpectrogram]:
    mel = spec.mel.compute(x)
    n_frames = len(x) // spec.mel.hop
    if n_frames == 0:
        raise LengthMismatchError(f"{len(x)} samples is shorter than one mel hop")
    return x.samples[: n_frames * spec.mel.hop], mel.trimmed(n_frames)


def prepare_training_example(x: Waveform, spec: HierarchySpec, level: int) -> TrainingExample:
    """Target, ground-truth conditioner and shared mel for ``level``.

    The mel comes from the top-rate signal; the waveform is cut to a whole
    number of mel frames so every level's length is ``frames * level_hop``.
    """
    if x.sample_rate != spec.rates[0]:
        raise RateMismatchError(f"expected {spec.rates[0]} Hz input, got {x.sample_rate} Hz")
    if not 0 <= level < spec.n_levels:
        raise InvalidParameterError(f"level {level} outside 0..{spec.n_levels - 1}")
    top, mel = _fit_to_frames(x, spec)
    x0 = cascade_downsample(top, spec, level)
    lower = training_conditioner(x0, spec, level) if level < spec.n_levels - 1 else None
    return TrainingExample(x0, lower, mel)


class LevelDataset:
    """Per-utterance arrays for one level, cropped on demand into training batches."""

    def __init__(self, waveforms: Iterable[Waveform], spec: HierarchySpec, level: int):
        self.spec, self.level = spec, level
        self.hop = spec.level_hop(level)
        self.items = []
        for x in waveforms:
            ex = prepare_training_example(x, spec, level)
            sigma2 = frame_prior(ex.mel.values, spec.prior_floor)
            self.items.append((ex.x0.astype(np.float32), ex.lower, mel_features(ex.mel), sigma2))
        if not self.items:
            raise EmptyCorpusError("no training utterances")

    def __len__(self) -> int:
        return len(self.items)

    def sample(self, rng: np.random.Generator, batch: int, frames: int):
        """Random crops of ``frames`` mel frames: ``(x0, lower, mel, sigma2)``."""
        hop = self.hop
        xs, lows, mels, s2 = [], [], [], []
        for idx in rng.integers(0, len(self.items), size=batch):
            x0, lower, feats, sig = self.items[idx]
            n_frames = len(feats)
            if n_frames < frames:
                raise LengthMismatchError(f"utterance of {n_frames} frames shorter than crop of {frames}")
            f = int(rng.integers(0, n_frames - frames + 1))
            span = slice(f * hop, (f + frames) * hop)
            xs.append(x0[span])
            lows.append(None if lower is None else lower[span])
            mels.append(feats[f : f + frames])
            s2.append(np.repeat(sig[f : f + frames], hop))
        lower = None if lows[0] is None else np.stack(lows)
        return np.stack(xs), lower, np.stack(mels), np.stack(s2)


# -- bundles and training -------------------------------------------------------------------------------


@dataclass(eq=False)
class LevelBundle:
    level: int
    rate: int
    state: TrainState
    train_schedule: NoiseSchedule
    inference_schedule: NoiseSchedule

    def __post_init__(self):
        if self.inference_schedule.T < 1 or self.train_schedule.T < 1:
            raise InvalidParameterError("schedules must have at least one step")

    @property
    def net(self) -> EpsilonNet:
        return self.state.net


def init_bundles(spec: HierarchySpec, seed: int, lr: float = DEFAULT_LEARNING_RATE) -> list[LevelBundle]:
    """Fresh bundles; each level gets its own seed stream so levels stay independent."""
    children = np.random.SeedSequence(seed).spawn(spec.n_levels)
    out = []
    for i, (cfg, ss) in enumerate(zip(spec.nets, children)):
        net = EpsilonNet.init(cfg, np.random.default_rng(ss))
        out.append(LevelBundle(i, spec.rates[i], TrainState(net, lr=lr), spec.train_schedule(), spec.inference_schedule()))
    return out


def sample_steps(rng: np.random.Generator, T: int, batch: int) -> np.ndarray:
    return rng.integers(1, T + 1, size=batch)


def train_step(bundle: LevelBundle, x0, lower, mel, sigma2, rng: np.random.Generator, lr: float | None = None):
    """One weighted-loss Adam update on a batch; returns ``(loss, steps)``."""
    sched = bundle.train_schedule
    batch = x0.shape[0]
    t = sample_steps(rng, sched.T, batch)
    eps = (np.sqrt(sigma2) * rng.standard_normal(x0.shape)).astype(np.float32)
    ab = sched.alpha_bars[t - 1][:, None]
    x_t = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)
    net = bundle.net
    eps_hat = net.forward(x_t, t, mel, lower)
    loss = weighted_loss(eps, eps_hat, sigma2)
    grads = net.backward(weighted_loss_grad(eps, eps_hat, sigma2).astype(net.dtype))
    adam_step(bundle.state, grads, lr)
    return loss, t


def train_level(
    bundle: LevelBundle,
    data: LevelDataset,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 16,
    segment_frames: int = 16,
    callback: Callable[[int, float, np.ndarray], None] | None = None,
    lr_schedule: Callable[[int], float] | None = None,
) -> LevelBundle:
    """Run ``steps`` training updates on one level; touches no other level's state.

    ``lr_schedule`` maps the level's current step count to a learning rate;
    without it the optimizer state's own rate is used.
    """
    if len(data) == 0:
        raise EmptyCorpusError("no training utterances")
    if data.level != bundle.level or data.spec.rates[data.level] != bundle.rate:
        raise RateMismatchError(f"dataset for level {data.level} given to level {bundle.level}")
    for _ in range(steps):
        x0, lower, mel, sigma2 = data.sample(rng, batch_size, segment_frames)
        lr = None if lr_schedule is None else lr_schedule(bundle.state.step)
        loss, t = train_step(bundle, x0, lower, mel, sigma2, rng, lr)
        if callback is not None:
            callback(bundle.state.step, loss, t)
    return bundle


# -- generation -------------------------------------------------------------------------------------------


def sample_level(
    net: EpsilonNet,
    feats: np.ndarray,
    frame_sigma2: np.ndarray,
    hop: int,
    lower: np.ndarray | None,
    train_sched: NoiseSchedule,
    infer_sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Reverse chain at one rate; x_T and every intermediate z come from the adaptive prior."""
    std = np.sqrt(np.repeat(frame_sigma2, hop))
    net_steps = align_steps(train_sched, infer_sched)
    x = std * rng.standard_normal(len(std))
    for s in range(infer_sched.T, 0, -1):
        eps_hat = net.forward(x, net_steps[s - 1], feats, lower, keep_cache=False).astype(np.float64)
        z = std * rng.standard_normal(len(std)) if s > 1 else None
        x = posterior_step(x, eps_hat, s, infer_sched, z)
    return x


def _check_bundles(spec: HierarchySpec, bundles: Sequence[LevelBundle], allow_untrained: bool) -> None:
    if len(bundles) != spec.n_levels:
        raise InvalidParameterError(f"{spec.n_levels} levels but {len(bundles)} bundles")
    for i, b in enumerate(bundles):
        if b.rate != spec.rates[i] or b.level != i:
            raise RateMismatchError(f"bundle {i} is level {b.level} at {b.rate} Hz, spec wants {spec.rates[i]} Hz")
        if b.net.config != spec.nets[i]:
            raise InvalidParameterError(f"bundle {i} net config differs from the spec")
        if not allow_untrained and b.state.step == 0:
            raise UntrainedLevelError(f"level {i} ({b.rate} Hz) has not been trained")


def generate(
    spec: HierarchySpec,
    bundles: Sequence[LevelBundle],
    mel: MelSpectrogram,
    rng: np.random.Generator,
    ablate: str | None = None,
    allow_untrained: bool = False,
    lower_hook: Callable[[np.ndarray], np.ndarray] | None = None,
) -> Waveform:
    """Cascaded generation from the lowest level up; returns ``frames * hop`` samples at the top rate.

    ``ablate`` zeroes the mel input and/or the lower-rate conditioner of
    the top level only; the prior still follows the real mel.
    ``lower_hook`` lets callers alter each generated lower-level waveform
    before it is filtered into a conditioner.
    """
    _check_bundles(spec, bundles, allow_untrained)
    if mel.sample_rate != spec.rates[0] or mel.hop_samples != spec.mel.hop or mel.n_mels != spec.mel.n_mels:
        raise RateMismatchError("mel spectrogram does not match the hierarchy's mel config")
    if ablate is not None:
        if ablate not in ABLATIONS:
            raise InvalidParameterError(f"unknown ablation {ablate!r}")
        if spec.n_levels < 2:
            raise RequiresHierarchyError("conditioning ablation needs at least two levels")
    feats = mel_features(mel)
    frame_sigma2 = frame_prior(mel.values, spec.prior_floor)
    x_lower = None
    for i in range(spec.n_levels - 1, -1, -1):
        b = bundles[i]
        level_feats, lower = feats, None
        if x_lower is not None:
            if lower_hook is not None:
                x_lower = lower_hook(x_lower)
            lower = inference_conditioner(x_lower, spec, i).astype(np.float32)
        if i == 0 and ablate in ("zero_mel", "zero_both"):
            level_feats = np.zeros_like(feats)
        if i == 0 and ablate in ("zero_lower", "zero_both"):
            lower = np.zeros_like(lower)
        x_lower = sample_level(
            b.net, level_feats, frame_sigma2, spec.level_hop(i), lower, b.train_schedule, b.inference_schedule, rng
        )
    return Waveform(x_lower, spec.rates[0])


def conditioning_ablation(
    spec: HierarchySpec, bundles: Sequence[LevelBundle], mel: MelSpectrogram, mode: str, rng: np.random.Generator
) -> Waveform:
    return generate(spec, bundles, mel, rng, ablate=mode)


def band_energy_fraction(x: Waveform, split_hz: float) -> float:
    """Fraction of spectral energy strictly below ``split_hz``."""
    spec = np.abs(np.fft.rfft(x.samples)) ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / x.sample_rate)
    total = spec.sum()
    return float(spec[freqs < split_hz].sum() / total) if total > 0 else float("nan")
