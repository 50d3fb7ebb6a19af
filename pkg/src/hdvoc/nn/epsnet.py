"""Non-causal dilated-convolution noise estimator with a hand-written backward pass.

Layout follows the DiffWave family: a 1x1 input projection, ``L`` gated
residual layers whose dilation cycles through ``1, 2, ..., 2**(l-1)`` within
each of ``m`` blocks, skip connections summed over layers, and a two-layer
1x1 output head.  Each gated layer sees three additive conditioners: a
diffusion-step embedding, the frame-rate mel features (projected, then
repeated ``hop`` times) and, optionally, a lower-rate waveform already
brought to the model rate.

Public inputs are ``(batch, time)``; activations are held as ``(channels, batch, time)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import InvalidParameterError, LengthMismatchError, StaleCacheError

_SQRT_HALF = math.sqrt(0.5)


@dataclass(frozen=True)
class EpsilonNetConfig:
    layers: int = 8
    blocks: int = 2
    kernel_size: int = 3
    residual_channels: int = 32
    step_embed_dim: int = 128
    step_hidden: int = 128
    n_mels: int = 80
    has_lower_conditioning: bool = False

    def __post_init__(self):
        if self.layers < 1 or self.blocks < 1 or self.layers % self.blocks:
            raise InvalidParameterError("layers must be a positive multiple of blocks")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidParameterError("kernel_size must be odd")
        if self.step_embed_dim < 2 or self.step_embed_dim % 2:
            raise InvalidParameterError("step_embed_dim must be even")
        if min(self.residual_channels, self.step_hidden, self.n_mels) < 1:
            raise InvalidParameterError("channel counts must be positive")

    @property
    def cycle(self) -> int:
        return self.layers // self.blocks

    def dilation(self, layer: int) -> int:
        return 2 ** (layer % self.cycle)

    @property
    def dilations(self) -> list[int]:
        return [self.dilation(j) for j in range(self.layers)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpsilonNetConfig":
        return cls(**d)


def receptive_field(cfg: EpsilonNetConfig) -> int:
    """Input span, in samples, that can influence one output sample."""
    return (cfg.kernel_size - 1) * sum(cfg.dilations) + 1


def step_embedding(t, dim: int) -> np.ndarray:
    """Interleaved ``(sin wt, cos wt)`` pairs with ``w`` from 1 down to 1e-4.

    ``t`` may be a scalar or a 1-D array of (possibly fractional) steps;
    the result has shape ``(dim,)`` or ``(len(t), dim)``.
    """
    if dim < 2 or dim % 2:
        raise InvalidParameterError("dim must be even")
    steps = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = 10.0 ** (-4.0 * np.arange(half) / max(half - 1, 1))
    angles = steps[..., None] * freqs
    out = np.empty(steps.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


class EpsilonNet:
    """Parameters live in ``self.params`` (name -> array); gradients use the same names."""

    def __init__(self, config: EpsilonNetConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self._cache = None
        expected = self.parameter_shapes(config)
        if set(expected) != set(params):
            raise InvalidParameterError("parameter names do not match config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise InvalidParameterError(f"{name}: shape {params[name].shape} != {shape}")

    @staticmethod
    def parameter_shapes(cfg: EpsilonNetConfig) -> dict[str, tuple]:
        c, h, e = cfg.residual_channels, cfg.step_hidden, cfg.step_embed_dim
        shapes = {
            "input.w": (c,),
            "input.b": (c,),
            "step.w1": (h, e),
            "step.b1": (h,),
            "step.w2": (h, h),
            "step.b2": (h,),
        }
        for j in range(cfg.layers):
            p = f"layer{j}."
            shapes[p + "step_w"] = (c, h)
            shapes[p + "step_b"] = (c,)
            shapes[p + "conv_w"] = (2 * c, c, cfg.kernel_size)
            shapes[p + "conv_b"] = (2 * c,)
            shapes[p + "mel_w"] = (2 * c, cfg.n_mels)
            if cfg.has_lower_conditioning:
                shapes[p + "lower_w"] = (2 * c,)
            shapes[p + "out_w"] = (2 * c, c)
            shapes[p + "out_b"] = (2 * c,)
        shapes["skip.w"] = (c, c)
        shapes["skip.b"] = (c,)
        shapes["final.w"] = (c,)
        shapes["final.b"] = (1,)
        return shapes

    @classmethod
    def init(cls, config: EpsilonNetConfig, rng: np.random.Generator, dtype=np.float32) -> "EpsilonNet":
        """Kaiming-normal convolutions, uniform step MLP, zero biases and zero output head."""
        params = {}
        for name, shape in cls.parameter_shapes(config).items():
            kind = name.split(".", 1)[1]
            if kind in ("b", "b1", "b2", "step_b", "conv_b", "out_b") or name.startswith("final."):
                arr = np.zeros(shape)
            elif kind in ("w1", "w2", "step_w"):
                bound = 1.0 / math.sqrt(shape[1])
                arr = rng.uniform(-bound, bound, shape)
            elif kind == "conv_w":
                arr = rng.standard_normal(shape) * math.sqrt(2.0 / (shape[1] * shape[2]))
            elif name == "input.w" or kind == "lower_w":
                arr = rng.standard_normal(shape) * math.sqrt(2.0)
            else:
                arr = rng.standard_normal(shape) * math.sqrt(2.0 / shape[-1])
            params[name] = arr.astype(dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["input.w"].dtype

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "EpsilonNet":
        return EpsilonNet(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- forward ----------------------------------------------------------------

    def _check_inputs(self, x, steps, mel, lower):
        cfg = self.config
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None]
        batch, n = x.shape
        steps = np.broadcast_to(np.asarray(steps, dtype=np.float64), (batch,))
        mel = np.asarray(mel, dtype=self.dtype)
        if mel.ndim == 2:
            mel = mel[None]
        if mel.shape[0] != batch or mel.shape[2] != cfg.n_mels:
            raise LengthMismatchError(f"mel shape {mel.shape} does not match batch {batch} x {cfg.n_mels} bands")
        n_frames = mel.shape[1]
        if n_frames == 0 or n % n_frames:
            raise LengthMismatchError(f"{n} samples cannot be split into {n_frames} mel frames")
        if cfg.has_lower_conditioning:
            if lower is None:
                raise LengthMismatchError("this net requires a lower-rate conditioning signal")
            lower = np.asarray(lower, dtype=self.dtype)
            if lower.ndim == 1:
                lower = lower[None]
            if lower.shape != x.shape:
                raise LengthMismatchError(f"lower conditioning shape {lower.shape} != {x.shape}")
        elif lower is not None:
            raise LengthMismatchError("this net takes no lower-rate conditioning")
        return x, steps, mel, lower, n // n_frames

    def __call__(self, x, steps, mel, lower=None):
        return self.forward(x, steps, mel, lower)

    def forward(self, x, steps, mel, lower=None, keep_cache: bool = True) -> np.ndarray:
        """Predict the noise in ``x``.

        ``x``: ``(B, T)`` or ``(T,)`` noisy waveform; ``steps``: scalar or
        ``(B,)`` diffusion steps; ``mel``: ``(B, F, n_mels)`` frame-rate
        features with ``T`` a multiple of ``F``; ``lower``: ``(B, T)`` or None.
        """
        squeeze = np.ndim(x) == 1
        x, steps, mel, lower, hop = self._check_inputs(x, steps, mel, lower)
        cfg, P = self.config, self.params
        c, k, n_layers = cfg.residual_channels, cfg.kernel_size, cfg.layers
        batch, n = x.shape
        bt = batch * n

        # internal layout is (channels, batch, time) so projections are plain GEMMs
        pre0 = P["input.w"][:, None, None] * x[None] + P["input.b"][:, None, None]
        h = np.maximum(pre0, 0)

        raw = step_embedding(steps, cfg.step_embed_dim).astype(self.dtype)
        e1 = raw @ P["step.w1"].T + P["step.b1"]
        a1 = _silu(e1)
        e2 = a1 @ P["step.w2"].T + P["step.b2"]
        emb = _silu(e2)

        layer_caches = []
        skip = np.zeros((c, bt), dtype=self.dtype)
        for j in range(n_layers):
            p = f"layer{j}."
            dil = cfg.dilation(j)
            pad = dil * (k - 1) // 2
            d = emb @ P[p + "step_w"].T + P[p + "step_b"]
            yp = np.pad(h + d.T[:, :, None], ((0, 0), (0, 0), (pad, pad)))
            stack = np.concatenate([yp[:, :, i * dil : i * dil + n] for i in range(k)], axis=0).reshape(k * c, bt)
            w_flat = P[p + "conv_w"].transpose(0, 2, 1).reshape(2 * c, k * c)
            act = (w_flat @ stack).reshape(2 * c, batch, n)
            act += P[p + "conv_b"][:, None, None]
            act += np.repeat(np.tensordot(P[p + "mel_w"], mel, axes=([1], [2])), hop, axis=2)
            if lower is not None:
                act += P[p + "lower_w"][:, None, None] * lower[None]
            ta = np.tanh(act[:c])
            sa = _sigmoid(act[c:])
            g = (ta * sa).reshape(c, bt)
            o = P[p + "out_w"] @ g
            o += P[p + "out_b"][:, None]
            h = (h + o[:c].reshape(c, batch, n)) * _SQRT_HALF
            skip += o[c:]
            layer_caches.append((stack, ta, sa, g))

        s = skip / math.sqrt(n_layers)
        pre_skip = P["skip.w"] @ s + P["skip.b"][:, None]
        q = np.maximum(pre_skip, 0)
        out = (P["final.w"] @ q + P["final.b"][0]).reshape(batch, n)

        if keep_cache:
            self._cache = dict(
                inputs=(x, steps, mel, lower),
                hop=hop,
                pre0=pre0,
                raw=raw,
                e1=e1,
                a1=a1,
                e2=e2,
                emb=emb,
                layers=layer_caches,
                s=s,
                q=q,
            )
        return out[0] if squeeze else out

    # -- backward ---------------------------------------------------------------

    def backward(self, grad_out, inputs: tuple | None = None) -> dict[str, np.ndarray]:
        """Parameter gradients of ``sum(grad_out * forward(...))`` for the cached forward pass.

        ``inputs``, if given as ``(x, steps, mel, lower)``, must equal the
        inputs of that forward pass.
        """
        if self._cache is None:
            raise StaleCacheError("backward() called before forward()")
        cache = self._cache
        cx, csteps, cmel, clower = cache["inputs"]
        if inputs is not None:
            try:
                checked = self._check_inputs(*inputs)[:4]
            except LengthMismatchError as exc:
                raise StaleCacheError(str(exc)) from exc
            for new, old in zip(checked, cache["inputs"]):
                if (new is None) != (old is None) or (new is not None and not np.array_equal(new, old)):
                    raise StaleCacheError("backward() inputs differ from the cached forward pass")
        cfg, P = self.config, self.params
        dt = self.dtype
        c, k, n_layers = cfg.residual_channels, cfg.kernel_size, cfg.layers
        hop = cache["hop"]
        grad_out = np.asarray(grad_out, dtype=dt)
        if grad_out.ndim == 1:
            grad_out = grad_out[None]
        if grad_out.shape != cx.shape:
            raise LengthMismatchError(f"grad shape {grad_out.shape} != output shape {cx.shape}")
        batch, n = cx.shape
        bt = batch * n
        n_frames = n // hop
        gflat = grad_out.reshape(1, bt)
        grads = {}

        q, s = cache["q"], cache["s"]
        grads["final.w"] = (q @ gflat.T)[:, 0]
        grads["final.b"] = np.array([grad_out.sum()], dtype=dt)
        dpre = P["final.w"][:, None] * gflat
        dpre *= q > 0
        grads["skip.w"] = dpre @ s.T
        grads["skip.b"] = dpre.sum(axis=1)
        dskip = (P["skip.w"].T @ dpre) / math.sqrt(n_layers)

        emb = cache["emb"]
        demb = np.zeros_like(emb)
        dh = np.zeros((c, bt), dtype=dt)
        mel_flat = cmel.reshape(batch * n_frames, cfg.n_mels)
        for j in reversed(range(n_layers)):
            p = f"layer{j}."
            dil = cfg.dilation(j)
            pad = dil * (k - 1) // 2
            stack, ta, sa, g = cache["layers"][j]
            do = np.concatenate([dh * _SQRT_HALF, dskip], axis=0)
            grads[p + "out_w"] = do @ g.T
            grads[p + "out_b"] = do.sum(axis=1)
            dg = (P[p + "out_w"].T @ do).reshape(c, batch, n)
            dact = np.concatenate([dg * sa * (1.0 - ta * ta), dg * ta * sa * (1.0 - sa)], axis=0)
            grads[p + "conv_b"] = dact.sum(axis=(1, 2))
            dact_frames = dact.reshape(2 * c, batch * n_frames, hop).sum(axis=2)
            grads[p + "mel_w"] = dact_frames @ mel_flat
            if clower is not None:
                grads[p + "lower_w"] = dact.reshape(2 * c, bt) @ clower.reshape(bt)
            dact = dact.reshape(2 * c, bt)
            dw_flat = dact @ stack.T
            grads[p + "conv_w"] = dw_flat.reshape(2 * c, k, c).transpose(0, 2, 1)
            w_flat = P[p + "conv_w"].transpose(0, 2, 1).reshape(2 * c, k * c)
            dstack = (w_flat.T @ dact).reshape(k, c, batch, n)
            dyp = np.zeros((c, batch, n + 2 * pad), dtype=dt)
            for i in range(k):
                dyp[:, :, i * dil : i * dil + n] += dstack[i]
            dy = dyp[:, :, pad : pad + n]
            dd = dy.sum(axis=2).T
            grads[p + "step_w"] = dd.T @ emb
            grads[p + "step_b"] = dd.sum(axis=0)
            demb += dd @ P[p + "step_w"]
            dh = dh * _SQRT_HALF + dy.reshape(c, bt)

        dpre0 = dh.reshape(c, batch, n) * (cache["pre0"] > 0)
        grads["input.w"] = dpre0.reshape(c, bt) @ cx.reshape(bt)
        grads["input.b"] = dpre0.sum(axis=(1, 2))

        de2 = demb * _silu_grad(cache["e2"])
        grads["step.w2"] = de2.T @ cache["a1"]
        grads["step.b2"] = de2.sum(axis=0)
        de1 = (de2 @ P["step.w2"]) * _silu_grad(cache["e1"])
        grads["step.w1"] = de1.T @ cache["raw"]
        grads["step.b1"] = de1.sum(axis=0)
        return {name: np.asarray(grads[name], dtype=dt) for name in P}
