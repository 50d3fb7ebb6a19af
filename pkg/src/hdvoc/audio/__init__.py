from .filters import (
    FilterKernel,
    antialias_kernel,
    apply_fir,
    decimate,
    design_lowpass_fir,
    downsample,
    fir_filter,
    frequency_response_db,
    interpolate,
    upsample,
)
from .spectral import MelSpectrogram, StftConfig, hz_to_mel, log_mel, mel_filterbank, mel_to_hz, stft, stft_array
from .wav import read_wav, write_wav
from .waveform import Waveform

__all__ = [
    "FilterKernel",
    "MelSpectrogram",
    "StftConfig",
    "Waveform",
    "antialias_kernel",
    "apply_fir",
    "decimate",
    "design_lowpass_fir",
    "downsample",
    "fir_filter",
    "frequency_response_db",
    "hz_to_mel",
    "interpolate",
    "log_mel",
    "mel_filterbank",
    "mel_to_hz",
    "read_wav",
    "stft",
    "stft_array",
    "upsample",
    "write_wav",
]
