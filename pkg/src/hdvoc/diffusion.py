"""Single-rate DDPM arithmetic with an adaptive (mel-energy) Gaussian prior.

Step indices are 1-based throughout: ``t`` runs from 1 to ``T`` and
``alpha_bar(0)`` is defined as 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .audio.spectral import MelSpectrogram
from .audio.waveform import Waveform
from .errors import InvalidParameterError, LengthMismatchError

FAST_INFERENCE_BETAS = (0.0001, 0.001, 0.01, 0.05, 0.2, 0.5)
TRAIN_T = 50
TRAIN_BETA_START = 1e-4
TRAIN_BETA_END = 0.05
PRIOR_FLOOR = 0.1


class NonzeroFinalNoiseError(InvalidParameterError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise InvalidParameterError("betas must be a non-empty sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise InvalidParameterError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        return cls(betas, alphas, np.cumprod(alphas))

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise InvalidParameterError(f"step {t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def sigma2(self, t: int) -> float:
        """Posterior variance of step ``t``; zero at ``t == 1``."""
        return (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)

    def to_list(self) -> list[float]:
        return [float(b) for b in self.betas]


def make_training_schedule(T: int = TRAIN_T, beta_start: float = TRAIN_BETA_START, beta_end: float = TRAIN_BETA_END) -> NoiseSchedule:
    if T < 2:
        raise InvalidParameterError("a training schedule needs T >= 2")
    if not 0 < beta_start < beta_end < 1:
        raise InvalidParameterError("need 0 < beta_start < beta_end < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def make_inference_schedule(betas: Sequence[float] = FAST_INFERENCE_BETAS) -> NoiseSchedule:
    return NoiseSchedule.from_betas(betas)


def align_steps(train: NoiseSchedule, infer: NoiseSchedule) -> np.ndarray:
    """Fractional training-step index matching each inference step's noise level.

    Interpolates linearly in sqrt(alpha_bar) between neighbouring training
    steps, so a net trained on ``train`` can be queried with ``infer``.
    Levels outside the training range are clamped to its ends.
    """
    root = np.sqrt(train.alpha_bars)
    out = np.empty(infer.T)
    for s, ab in enumerate(np.sqrt(infer.alpha_bars)):
        if ab >= root[0]:
            out[s] = 1.0
        elif ab <= root[-1]:
            out[s] = float(train.T)
        else:
            j = int(np.searchsorted(-root, -ab))  # root[j-1] > ab >= root[j]
            out[s] = j + (root[j - 1] - ab) / (root[j - 1] - root[j])
    return out


@dataclass(eq=False)
class AdaptivePrior:
    sigma2: np.ndarray  # per sample
    frame_sigma2: np.ndarray  # per mel frame
    hop: int

    def __len__(self) -> int:
        return len(self.sigma2)

    def with_hop(self, hop: int) -> "AdaptivePrior":
        """Same frame variances expanded to a different samples-per-frame."""
        return AdaptivePrior(np.repeat(self.frame_sigma2, hop), self.frame_sigma2, hop)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.sigma2)


def frame_prior(mel_values: np.ndarray, floor: float = PRIOR_FLOOR) -> np.ndarray:
    energy = np.exp(np.asarray(mel_values, dtype=np.float64)).sum(axis=-1)
    return np.maximum(energy / energy.max(), floor)


def compute_prior(mel: MelSpectrogram, floor: float = PRIOR_FLOOR, hop: int | None = None) -> AdaptivePrior:
    """Per-sample prior variance from frame energies of a log-mel spectrogram.

    Frame energy is the band-sum of exponentiated log-mel power, divided by
    its maximum over frames and clamped below at ``floor``.
    """
    if mel.values.size == 0:
        raise InvalidParameterError("empty mel spectrogram")
    if not 0 < floor < 1:
        raise InvalidParameterError("floor must lie in (0, 1)")
    hop = mel.hop_samples if hop is None else hop
    frames = frame_prior(mel.values, floor)
    return AdaptivePrior(np.repeat(frames, hop), frames, hop)


def sample_prior_noise(prior: AdaptivePrior, rng: np.random.Generator) -> np.ndarray:
    return prior.std * rng.standard_normal(len(prior))


def _samples(x):
    return x.samples if isinstance(x, Waveform) else np.asarray(x)


def _like(template, values):
    return template.with_samples(values) if isinstance(template, Waveform) else values


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form forward draw ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    x = _samples(x0)
    e = np.asarray(eps)
    if e.shape != x.shape:
        raise LengthMismatchError(f"noise shape {e.shape} != data shape {x.shape}")
    sched._check(t)
    ab = sched.alpha_bar(t)
    return _like(x0, np.sqrt(ab) * x + np.sqrt(1.0 - ab) * e)


def posterior_step(x_t, eps_hat, t: int, sched: NoiseSchedule, z=None):
    """One ancestral reverse step from ``x_t`` to ``x_{t-1}``."""
    x = _samples(x_t)
    e = np.asarray(eps_hat)
    if t == 1 and z is not None and np.any(np.asarray(z) != 0):
        raise NonzeroFinalNoiseError("z must be zero at the final step")
    beta, alpha, ab = sched.beta(t), sched.alpha(t), sched.alpha_bar(t)
    mean = (x - beta / np.sqrt(1.0 - ab) * e) / np.sqrt(alpha)
    if z is not None and t > 1:
        mean = mean + np.sqrt(sched.sigma2(t)) * np.asarray(z)
    return _like(x_t, mean)


def reverse_chain(
    x_T: np.ndarray,
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    sched: NoiseSchedule,
    noise_fn: Callable[[], np.ndarray] | None,
) -> np.ndarray:
    """Run ``T`` posterior steps; ``noise_fn`` supplies z (None for a deterministic chain)."""
    x = x_T
    for t in range(sched.T, 0, -1):
        eps_hat = eps_fn(x, t)
        z = noise_fn() if (noise_fn is not None and t > 1) else None
        x = posterior_step(x, eps_hat, t, sched, z)
    return x


def _sigma2(prior) -> np.ndarray:
    return prior.sigma2 if isinstance(prior, AdaptivePrior) else np.asarray(prior)


def weighted_loss(eps, eps_hat, prior) -> float:
    """Mean of squared residuals weighted by the inverse prior variance."""
    eps, eps_hat = _samples(eps), _samples(eps_hat)
    s2 = _sigma2(prior)
    if eps.shape != eps_hat.shape or eps.shape[-1] != s2.shape[-1]:
        raise LengthMismatchError("eps, eps_hat and prior must have equal lengths")
    return float(np.mean((eps - eps_hat) ** 2 / s2))


def weighted_loss_grad(eps, eps_hat, prior) -> np.ndarray:
    """Gradient of :func:`weighted_loss` with respect to ``eps_hat``."""
    eps, eps_hat = _samples(eps), _samples(eps_hat)
    s2 = _sigma2(prior)
    if eps.shape != eps_hat.shape or eps.shape[-1] != s2.shape[-1]:
        raise LengthMismatchError("eps, eps_hat and prior must have equal lengths")
    return -2.0 * (eps - eps_hat) / s2 / eps.size
