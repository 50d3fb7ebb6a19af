from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidParameterError
from .epsnet import EpsilonNet

DEFAULT_LEARNING_RATE = 2e-4


@dataclass(eq=False)
class TrainState:
    net: EpsilonNet
    lr: float = DEFAULT_LEARNING_RATE
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.net.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))


def adam_step(
    state: TrainState,
    grads: dict[str, np.ndarray],
    lr: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """Bias-corrected Adam update, applied in place; returns ``state``."""
    params = state.net.params
    if set(grads) != set(params):
        raise InvalidParameterError("gradient names do not match parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise InvalidParameterError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
    lr = state.lr if lr is None else lr
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        params[name] -= update.astype(params[name].dtype)
    return state
