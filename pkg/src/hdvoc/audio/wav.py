"""RIFF/WAVE I/O for PCM16 and IEEE float32 files.

Multi-channel files are downmixed to mono by averaging channels.
"""
from __future__ import annotations

import os
import warnings

import numpy as np
from scipy.io import wavfile

from ..errors import UnsupportedFormatError
from .waveform import Waveform

FORMATS = ("pcm16", "float32")


def read_wav(path: str | os.PathLike) -> Waveform:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise UnsupportedFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: sample type {data.dtype} is not pcm16 or float32")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, rate)


def write_wav(path: str | os.PathLike, x: Waveform, format: str = "float32") -> None:
    if format == "float32":
        data = np.asarray(x.samples, dtype=np.float32)
    elif format == "pcm16":
        data = np.clip(np.round(np.asarray(x.samples) * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise UnsupportedFormatError(f"unknown format {format!r}; expected one of {FORMATS}")
    wavfile.write(path, x.sample_rate, data)
