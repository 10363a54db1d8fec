"""Mel-to-waveform conversion.

The built-in vocoder inverts the mel filterbank with non-negative least
squares and recovers phase by Griffin-Lim. Any other mel->audio callable with
the same frame geometry can be plugged in through :class:`ExternalVocoder`.
"""

from __future__ import annotations

import importlib
from functools import lru_cache
from typing import Callable, Optional, Protocol, Union

import numpy as np

from .audio import AudioBuffer, DspConfig, MelSpectrogram, istft, mel_filterbank, stft

GRIFFIN_LIM_ITERS = 32
NNLS_ITERS = 50


class Vocoder(Protocol):
    config: DspConfig

    def __call__(self, mel: MelSpectrogram) -> AudioBuffer: ...


def _check_geometry(mel: MelSpectrogram, cfg: DspConfig) -> np.ndarray:
    bands = mel.bands if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    if isinstance(mel, MelSpectrogram):
        m = mel.config
        if (m.sample_rate, m.win_size, m.hop_size, m.n_mels) != (cfg.sample_rate, cfg.win_size, cfg.hop_size, cfg.n_mels):
            raise ValueError("mel geometry does not match the vocoder configuration")
    if bands.ndim != 2 or bands.shape[0] != cfg.n_mels or bands.shape[1] < 1:
        raise ValueError(f"expected a [{cfg.n_mels}, T>=1] mel, got {bands.shape}")
    return np.asarray(bands, dtype=np.float64)


@lru_cache(maxsize=8)
def _inverse_operators(cfg: DspConfig):
    fb = mel_filterbank(cfg)
    return fb, np.linalg.pinv(fb), 1.0 / np.linalg.norm(fb, 2) ** 2


def mel_to_power(bands: np.ndarray, cfg: DspConfig, iters: int = NNLS_ITERS) -> np.ndarray:
    """Non-negative power spectrum ``[n_freqs, T]`` whose mel projection best matches ``bands``.

    Energies at the log floor are read as silence. Projected gradient descent
    starts from the clipped pseudo-inverse.
    """
    fb, pinv, step = _inverse_operators(cfg)
    energy = np.maximum(np.exp(bands) - cfg.log_floor, 0.0)
    power = np.maximum(pinv @ energy, 0.0)
    for _ in range(iters):
        power = np.maximum(power - step * (fb.T @ (fb @ power - energy)), 0.0)
    return power


def griffin_lim(magnitude: np.ndarray, cfg: DspConfig, iters: int = GRIFFIN_LIM_ITERS,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Phase recovery; ``iters = 0`` returns the zero-phase reconstruction."""
    n_frames = magnitude.shape[1]
    length = (n_frames - 1) * cfg.hop_size
    if rng is None:
        phase = np.ones_like(magnitude, dtype=np.complex128)
    else:
        phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    x = istft(magnitude * phase, cfg.win_size, cfg.hop_size, length)
    for _ in range(iters):
        if length == 0:
            break
        spec = stft(x, cfg.win_size, cfg.hop_size)[:, :n_frames]
        phase = spec / np.maximum(np.abs(spec), 1e-12)
        x = istft(magnitude * phase, cfg.win_size, cfg.hop_size, length)
    return x


class GriffinLimVocoder:
    """Parameter-free substitute for a neural vocoder, output at the DSP sample rate."""

    def __init__(self, config: Optional[DspConfig] = None, iters: int = GRIFFIN_LIM_ITERS):
        if iters < 0:
            raise ValueError("iteration count must be non-negative")
        self.config = config or DspConfig()
        self.iters = iters

    def num_parameters(self) -> int:
        return 0

    def __call__(self, mel: Union[MelSpectrogram, np.ndarray]) -> AudioBuffer:
        bands = _check_geometry(mel, self.config)
        magnitude = np.sqrt(mel_to_power(bands, self.config))
        x = griffin_lim(magnitude, self.config, self.iters)
        return AudioBuffer(np.clip(x, -1.0, 1.0), self.config.sample_rate)


class ExternalVocoder:
    """Adapter for any ``bands [n_mels, T] -> samples`` callable with matching geometry.

    ``from_spec("package.module:factory")`` imports ``factory`` and calls it with
    an optional checkpoint path to obtain the callable.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], config: Optional[DspConfig] = None):
        self.fn = fn
        self.config = config or DspConfig()

    @classmethod
    def from_spec(cls, spec: str, checkpoint: Optional[str] = None, config: Optional[DspConfig] = None):
        module_name, _, attr = spec.partition(":")
        if not attr:
            raise ValueError("external vocoder spec must look like 'module:factory'")
        factory = getattr(importlib.import_module(module_name), attr)
        fn = factory(checkpoint) if checkpoint is not None else factory()
        return cls(fn, config)

    def num_parameters(self) -> int:
        return int(getattr(self.fn, "num_parameters", lambda: 0)())

    def __call__(self, mel: Union[MelSpectrogram, np.ndarray]) -> AudioBuffer:
        bands = _check_geometry(mel, self.config)
        samples = np.asarray(self.fn(bands), dtype=np.float64).reshape(-1)
        expected = (bands.shape[1] - 1) * self.config.hop_size
        if abs(len(samples) - expected) > self.config.hop_size:
            raise ValueError(f"external vocoder returned {len(samples)} samples, expected about {expected}")
        return AudioBuffer(np.clip(samples, -1.0, 1.0), self.config.sample_rate)
