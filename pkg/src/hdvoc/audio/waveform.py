from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidParameterError


@dataclass(eq=False)
class Waveform:
    """Mono sample buffer tagged with its sampling rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise InvalidParameterError(f"expected mono samples, got shape {self.samples.shape}")
        if not np.issubdtype(self.samples.dtype, np.floating):
            self.samples = self.samples.astype(np.float64)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidParameterError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise InvalidParameterError("waveform contains NaN or Inf")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate)
