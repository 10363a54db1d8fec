"""Audio I/O, resampling, log-mel features and NCCF pitch tracking."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.ndimage import median_filter

PathLike = Union[str, os.PathLike]


# ---------------------------------------------------------------------- types


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"AudioBuffer expects 1-D samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioBuffer samples must be finite")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 22050
    win_size: int = 1024
    hop_size: int = 256
    n_mels: int = 80
    f_min: float = 0.0
    f_max: Optional[float] = None
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.f_max is None:
            object.__setattr__(self, "f_max", self.sample_rate / 2)
        if self.sample_rate <= 0 or self.win_size <= 0 or self.hop_size <= 0:
            raise ValueError("sample_rate, win_size and hop_size must be positive")
        if self.hop_size > self.win_size:
            raise ValueError("hop_size must not exceed win_size")
        if self.n_mels < 1:
            raise ValueError("n_mels must be at least 1")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def n_freqs(self) -> int:
        return self.win_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop_size + 1


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Log-mel energies, ``bands`` has shape ``[n_mels, frames]``."""

    bands: np.ndarray
    config: DspConfig = field(default_factory=DspConfig)

    def __post_init__(self):
        if self.bands.ndim != 2 or self.bands.shape[0] != self.config.n_mels:
            raise ValueError(f"mel bands must be [{self.config.n_mels}, T], got {self.bands.shape}")
        if not np.all(np.isfinite(self.bands)):
            raise ValueError("mel bands must be finite")

    @property
    def n_frames(self) -> int:
        return self.bands.shape[1]


@dataclass(frozen=True, eq=False)
class PitchContour:
    f0: np.ndarray
    voiced: np.ndarray

    def __len__(self) -> int:
        return len(self.f0)


# ------------------------------------------------------------------------ WAV


class WavError(ValueError):
    pass


class WavFileNotFoundError(WavError, FileNotFoundError):
    pass


class MalformedWavError(WavError):
    pass


class UnsupportedWavEncodingError(WavError):
    pass


_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def load_wav(path: PathLike) -> AudioBuffer:
    """Read a PCM16 or float32 RIFF/WAVE file, averaging channels to mono."""
    if not os.path.isfile(path):
        raise WavFileNotFoundError(f"no such file: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"{path}: chunk {chunk_id!r} truncated")
        if chunk_id == b"fmt ":
            if size < 16:
                raise MalformedWavError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE:
                if size < 26:
                    raise MalformedWavError(f"{path}: extensible fmt chunk too short")
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise MalformedWavError(f"{path}: missing fmt or data chunk")
    encoding, channels, rate, _, _, bits = fmt
    if channels < 1 or rate < 1:
        raise MalformedWavError(f"{path}: invalid channel count or sample rate")
    if encoding == _PCM and bits == 16:
        samples = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif encoding == _FLOAT and bits == 32:
        samples = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedWavEncodingError(f"{path}: format tag {encoding} with {bits} bits is not supported")
    frames = len(samples) // channels
    samples = samples[: frames * channels].reshape(frames, channels).mean(axis=1)
    return AudioBuffer(np.clip(samples, -1.0, 1.0), rate)


def save_wav(path: PathLike, audio: AudioBuffer, encoding: str = "pcm16") -> None:
    """Write mono audio as PCM16 (default) or float32."""
    x = np.clip(audio.samples, -1.0, 1.0)
    if encoding == "pcm16":
        payload = np.round(x * 32767.0).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, audio.sample_rate, audio.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)


# ----------------------------------------------------------------- resampling

RESAMPLE_TAPS = 16


def resample(audio: AudioBuffer, target_rate: int, taps: int = RESAMPLE_TAPS) -> AudioBuffer:
    """Band-limited interpolation with a Hann-windowed sinc kernel of ``taps`` points."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    src = audio.sample_rate
    if target_rate == src:
        return AudioBuffer(audio.samples.copy(), src)
    n = len(audio.samples)
    n_out = int(round(n * target_rate / src))
    if n_out == 0 or n == 0:
        return AudioBuffer(np.zeros(n_out), target_rate)
    cutoff = min(1.0, target_rate / src)
    pos = np.arange(n_out) * (src / target_rate)
    half = taps // 2
    idx = np.floor(pos).astype(np.int64)[:, None] + np.arange(-half + 1, half + 1)[None, :]
    dist = pos[:, None] - idx
    kernel = cutoff * np.sinc(cutoff * dist) * 0.5 * (1.0 + np.cos(np.pi * np.clip(dist / half, -1, 1)))
    valid = (idx >= 0) & (idx < n)
    kernel = np.where(valid, kernel, 0.0)
    norm = kernel.sum(axis=1, keepdims=True)
    kernel = kernel / np.where(np.abs(norm) > 1e-12, norm, 1.0)
    gathered = audio.samples[np.clip(idx, 0, n - 1)]
    return AudioBuffer((kernel * gathered).sum(axis=1), target_rate)


# ------------------------------------------------------------------- spectra


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Centre-padded (reflect) frames, shape ``[n // hop + 1, win]``."""
    xp = np.pad(np.asarray(x, dtype=np.float64), (win // 2, win // 2), mode="reflect")
    xp = np.ascontiguousarray(xp)
    n_frames = len(x) // hop + 1
    return as_strided(xp, shape=(n_frames, win), strides=(hop * xp.strides[0], xp.strides[0]), writeable=False)


def stft(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Complex spectrum ``[win // 2 + 1, frames]`` with a Hann window."""
    frames = frame_signal(x, win, hop) * hann_window(win)
    return np.fft.rfft(frames, n=win, axis=1).T


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, win = frames.shape
    total = win + hop * (n_frames - 1)
    if win % hop:
        idx = (np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]).reshape(-1)
        return np.bincount(idx, weights=np.ascontiguousarray(frames).reshape(-1), minlength=total)
    # whole hops per window: add each hop-sized column block at its frame offset
    r = win // hop
    out = np.zeros((n_frames + r - 1, hop))
    for k in range(r):
        out[k:k + n_frames] += frames[:, k * hop:(k + 1) * hop]
    return out.reshape(-1)


def istft(spec: np.ndarray, win: int, hop: int, length: Optional[int] = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n_frames = spec.shape[1]
    window = hann_window(win)
    frames = np.fft.irfft(spec.T, n=win, axis=1) * window
    out = _overlap_add(frames, hop)
    norm = _overlap_add(np.broadcast_to(window * window, frames.shape), hop)
    out = out / np.where(norm > 1e-8, norm, 1.0)
    out = out[win // 2:]
    if length is None:
        length = hop * (n_frames - 1)
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out[:length]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """HTK-scale triangular filters without area normalisation, ``[n_mels, n_freqs]``."""
    freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_freqs)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_band_of(freq_hz: float, cfg: DspConfig) -> int:
    """Index of the filter whose peak is closest to ``freq_hz`` on the mel scale."""
    centres = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))[1:-1]
    return int(np.argmin(np.abs(hz_to_mel(centres) - hz_to_mel(freq_hz))))


def mel_spectrogram(audio: AudioBuffer, cfg: DspConfig = DspConfig()) -> MelSpectrogram:
    if audio.sample_rate != cfg.sample_rate:
        raise ValueError(f"audio is {audio.sample_rate} Hz but the config expects {cfg.sample_rate} Hz")
    if len(audio) == 0:
        raise ValueError("cannot compute a mel spectrogram of empty audio")
    power = np.abs(stft(audio.samples, cfg.win_size, cfg.hop_size)) ** 2
    energies = mel_filterbank(cfg) @ power
    return MelSpectrogram(np.log(np.maximum(energies, cfg.log_floor)), cfg)


# ---------------------------------------------------------------------- pitch

F0_MIN = 60.0
F0_MAX = 400.0
VOICING_THRESHOLD = 0.3
MEDIAN_WIDTH = 5
CONTEXT_HOPS = 3
_OCTAVE_TOLERANCE = 0.95
_ENERGY_FLOOR = 1e-10


def nccf_track(audio: AudioBuffer, cfg: DspConfig = DspConfig(), f0_min: float = F0_MIN,
               f0_max: float = F0_MAX, threshold: float = VOICING_THRESHOLD) -> np.ndarray:
    """Per-frame f0 before smoothing; 0 marks unvoiced frames.

    Frames are ``CONTEXT_HOPS`` hops long and centred on the mel frame grid.
    """
    sr = audio.sample_rate
    if not 0 < f0_min < f0_max <= sr / 2:
        raise ValueError(f"invalid f0 range [{f0_min}, {f0_max}] for {sr} Hz audio")
    if len(audio) == 0:
        raise ValueError("cannot track pitch of empty audio")
    x = audio.samples
    win = CONTEXT_HOPS * cfg.hop_size
    lag_lo = max(2, int(math.ceil(sr / f0_max)))
    lag_hi = int(math.floor(sr / f0_min))
    n_frames = cfg.n_frames(len(x))
    seg_len = win + lag_hi + 2
    xp = np.concatenate([np.zeros(win // 2), x, np.zeros(seg_len)])
    segs = as_strided(xp, shape=(n_frames, seg_len), strides=(cfg.hop_size * xp.strides[0], xp.strides[0]),
                      writeable=False)
    frames = segs[:, :win]
    nfft = 1 << int(math.ceil(math.log2(seg_len + win)))
    corr = np.fft.irfft(np.conj(np.fft.rfft(frames, nfft, axis=1)) * np.fft.rfft(segs, nfft, axis=1), nfft, axis=1)
    corr = corr[:, : lag_hi + 2]
    cs = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(segs * segs, axis=1)], axis=1)
    lags = np.arange(lag_hi + 2)
    e_lag = cs[:, lags + win] - cs[:, lags]
    e_frame = cs[:, win:win + 1]
    denom = np.sqrt(e_frame * e_lag)
    live = (e_frame > _ENERGY_FLOOR) & (e_lag > _ENERGY_FLOOR)
    nccf = np.where(live, corr / np.where(live, denom, 1.0), 0.0)

    f0 = np.zeros(n_frames)
    for t in range(n_frames):
        row = nccf[t]
        band = row[lag_lo:lag_hi + 1]
        peak = band.max()
        if peak < threshold:
            continue
        best = lag_lo + int(np.argmax(band))
        for lag in range(lag_lo, lag_hi + 1):
            left = row[lag - 1]
            right = row[lag + 1]
            if row[lag] >= _OCTAVE_TOLERANCE * peak and row[lag] >= left and row[lag] >= right:
                best = lag
                break
        a, b, c = row[best - 1], row[best], row[best + 1]
        curvature = a - 2 * b + c
        shift = 0.5 * (a - c) / curvature if curvature < 0 else 0.0
        f0[t] = float(np.clip(sr / (best + np.clip(shift, -0.5, 0.5)), f0_min, f0_max))
    return f0


def smooth_pitch(f0: np.ndarray, width: int = MEDIAN_WIDTH) -> PitchContour:
    """Median-filter a raw contour; voicing follows the filtered values."""
    smoothed = median_filter(np.asarray(f0, dtype=np.float64), size=width, mode="nearest")
    return PitchContour(smoothed, smoothed > 0)


def extract_pitch(audio: AudioBuffer, cfg: DspConfig = DspConfig(), f0_min: float = F0_MIN,
                  f0_max: float = F0_MAX) -> PitchContour:
    return smooth_pitch(nccf_track(audio, cfg, f0_min, f0_max))
