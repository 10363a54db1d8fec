"""Architectural blocks shared by the five networks.

Sequence blocks take ``[batch, time, dim]``; convolutional front ends take
``[batch, channels, time]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor, get_default_dtype
from .module import (
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
)

DROPOUT = 0.1


@dataclass(frozen=True)
class BlockPreset:
    """Hyperparameters for every block.

    ``paper`` carries the published sizes where they exist (Conformer x12 at
    512, FFT stacks 384/1536, embeddings 192/512, vocabulary 128 + blank).
    ``toy`` divides every width by 8 and every depth by 6 (at least one
    layer) while keeping the embedding and mel interfaces at full size.
    """

    name: str
    n_mels: int = 80
    # AE/GE
    jasper_widths: Tuple[int, int, int] = (256, 384, 512)
    jasper_kernels: Tuple[int, int, int] = (11, 15, 19)
    jasper_repeats: int = 3
    pooling_attention: int = 128
    decoder_kernel: int = 1
    accent_dim: int = 192
    n_accents: int = 40
    n_genders: int = 2
    # SE
    se_sample_rate: int = 16000
    sinc_channels: int = 80
    sinc_kernel: int = 251
    xvector_hidden: int = 512
    xvector_stats: int = 1500
    speaker_dim: int = 512
    # STP
    stp_dim: int = 512
    conformer_layers: int = 12
    conformer_heads: int = 8
    conformer_ff_mult: int = 4
    conformer_kernel: int = 31
    stp_accent_layers: int = 2
    stp_accent_inner: int = 1536
    vocab_size: int = 128
    # STS
    sts_dim: int = 384
    sts_inner: int = 1536
    sts_heads: int = 2
    sts_encoder_layers: int = 6
    sts_accent_layers: int = 1
    sts_speaker_layers: int = 1
    sts_decoder_layers: int = 6
    fft_kernel: int = 3
    dropout: float = DROPOUT

    @property
    def n_tokens(self) -> int:
        return self.vocab_size + 1


PAPER = BlockPreset(name="paper")

TOY = BlockPreset(
    name="toy",
    jasper_widths=(32, 48, 64),
    jasper_kernels=(5, 5, 5),
    pooling_attention=16,
    sinc_channels=10,
    sinc_kernel=101,
    xvector_hidden=64,
    xvector_stats=188,
    stp_dim=64,
    conformer_layers=2,
    conformer_heads=2,
    conformer_kernel=7,
    stp_accent_layers=1,
    stp_accent_inner=192,
    sts_dim=48,
    sts_inner=192,
    sts_heads=2,
    sts_encoder_layers=1,
    sts_accent_layers=1,
    sts_speaker_layers=1,
    sts_decoder_layers=1,
)

PRESETS = {"paper": PAPER, "toy": TOY}


def get_preset(name: str, **overrides) -> BlockPreset:
    try:
        preset = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(preset, **overrides) if overrides else preset


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    div = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / d)
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe.astype(get_default_dtype())


def _channels_first(x: Tensor) -> Tensor:
    return ad.swapaxes(x, 1, 2)


STD_EPS = 1e-12


def _std(var: Tensor) -> Tensor:
    # sqrt(var + eps) - sqrt(eps): smooth at zero and exactly 0 for a constant signal
    return ad.sqrt(ad.clamp(var, lo=0.0) + STD_EPS) - math.sqrt(STD_EPS)


def _expect(x: Tensor, ndim: int, dim_axis: int, size: int, what: str) -> None:
    if x.ndim != ndim or x.shape[dim_axis] != size:
        raise ValueError(f"{what}: expected rank {ndim} with size {size} on axis {dim_axis}, got {x.shape}")


# --------------------------------------------------------------------- Jasper


class JasperBlock(Module):
    """``repeats`` x (conv - batchnorm - relu - dropout) with a 1x1 residual."""

    def __init__(self, c_in: int, c_out: int, kernel: int, repeats: int, rng, dropout: float = DROPOUT):
        super().__init__()
        pad = (kernel - 1) // 2
        self.convs = ModuleList(
            Conv1d(c_in if i == 0 else c_out, c_out, kernel, rng, padding=pad, bias=False) for i in range(repeats)
        )
        self.norms = ModuleList(BatchNorm1d(c_out) for _ in range(repeats))
        self.drops = ModuleList(Dropout(dropout, rng) for _ in range(repeats))
        self.res_conv = Conv1d(c_in, c_out, 1, rng, bias=False)
        self.res_norm = BatchNorm1d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        residual = self.res_norm(self.res_conv(x))
        h = x
        last = len(self.convs) - 1
        for i, (conv, norm, drop) in enumerate(zip(self.convs, self.norms, self.drops)):
            h = norm(conv(h))
            if i == last:
                h = h + residual
            h = drop(ad.relu(h))
        return h


class JasperStack(Module):
    def __init__(self, preset: BlockPreset, rng):
        super().__init__()
        widths = (preset.n_mels,) + tuple(preset.jasper_widths)
        self.blocks = ModuleList(
            JasperBlock(widths[i], widths[i + 1], preset.jasper_kernels[i], preset.jasper_repeats, rng, preset.dropout)
            for i in range(len(preset.jasper_widths))
        )
        self.n_mels = preset.n_mels
        self.out_channels = widths[-1]

    def forward(self, mel: Tensor) -> Tensor:
        """``[B, n_mels, T] -> [B, C, T]``."""
        _expect(mel, 3, 1, self.n_mels, "jasper_stack")
        h = mel
        for block in self.blocks:
            h = block(h)
        return h


# ---------------------------------------------------- attentive pooling head


class AttentivePoolingDecoder(Module):
    """Attentive statistics pooling -> layer norm -> 1-D conv embedding -> class logits.

    The pooled vector is normalised per example, so a batch of one trains and
    infers the same way.
    """

    def __init__(self, channels: int, attention: int, emb_dim: int, n_classes: int, rng, kernel: int = 1):
        super().__init__()
        self.channels = channels
        self.attn_in = Conv1d(3 * channels, attention, 1, rng)
        self.attn_out = Conv1d(attention, channels, 1, rng)
        self.norm = LayerNorm(2 * channels)
        self.embed = Conv1d(2 * channels, emb_dim, kernel, rng, padding=(kernel - 1) // 2)
        self.classify = Linear(emb_dim, n_classes, rng)

    def attention_weights(self, h: Tensor) -> Tensor:
        mean = ad.mean(h, axis=2, keepdims=True)
        centred = h - mean
        std = _std(ad.mean(centred * centred, axis=2, keepdims=True))
        context = ad.concat([h, ad.broadcast_to(mean, h.shape), ad.broadcast_to(std, h.shape)], axis=1)
        scores = self.attn_out(ad.tanh(self.attn_in(context)))
        return ad.softmax(scores, axis=2)

    def pool(self, h: Tensor) -> Tuple[Tensor, Tensor]:
        """Attention-weighted mean and standard deviation, each ``[B, C]``."""
        if h.ndim != 3 or h.shape[2] == 0:
            raise ValueError(f"attentive pooling needs [B, C, T>=1], got {h.shape}")
        _expect(h, 3, 1, self.channels, "attention_pooling_decoder")
        w = self.attention_weights(h)
        mu = ad.sum_(w * h, axis=2, keepdims=True)
        centred = h - mu
        sigma = _std(ad.sum_(w * centred * centred, axis=2))
        return ad.reshape(mu, mu.shape[:2]), sigma

    def forward(self, h: Tensor) -> Tuple[Tensor, Tensor]:
        """Returns ``(embedding [B, emb_dim], logits [B, n_classes])``."""
        mu, sigma = self.pool(h)
        pooled = self.norm(ad.concat([mu, sigma], axis=1))
        emb = self.embed(ad.reshape(pooled, pooled.shape + (1,)))
        emb = ad.reshape(emb, emb.shape[:2])
        return emb, self.classify(emb)


# ------------------------------------------------------------------- SincNet


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


class SincConv(Module):
    """Learnable band-pass filters built as differences of windowed sincs.

    Each channel is parametrised by a low cutoff and a bandwidth (Hz).  The
    cutoffs are clamped to ``[min_low_hz, nyquist]`` and every band keeps at
    least ``min_band_hz`` of width.  Filters have unit pass-band gain.
    """

    def __init__(self, channels: int, kernel: int, sample_rate: int = 16000, rng=None,
                 min_low_hz: float = 50.0, min_band_hz: float = 50.0):
        super().__init__()
        if kernel % 2 == 0:
            kernel += 1
        self.kernel, self.sample_rate = kernel, sample_rate
        self.min_low_hz, self.min_band_hz = min_low_hz, min_band_hz
        nyquist = sample_rate / 2
        edges = _mel_to_hz(np.linspace(_hz_to_mel(30.0), _hz_to_mel(nyquist - min_low_hz - min_band_hz), channels + 1))
        self.low_hz = Parameter((edges[:-1] - min_low_hz)[:, None])
        self.band_hz = Parameter(np.diff(edges)[:, None] - min_band_hz)
        half = (kernel - 1) // 2
        n = np.arange(-half, 0)
        self._t_left = (n / sample_rate)[None, :]
        self._window_left = (0.54 - 0.46 * np.cos(2 * np.pi * np.arange(half) / (kernel - 1)))[None, :]

    def set_bands(self, low_hz: Sequence[float], high_hz: Sequence[float]) -> None:
        low = np.asarray(low_hz, dtype=np.float64)[:, None]
        high = np.asarray(high_hz, dtype=np.float64)[:, None]
        self.low_hz.data = (low - self.min_low_hz).astype(self.low_hz.dtype)
        self.band_hz.data = (high - low - self.min_band_hz).astype(self.band_hz.dtype)

    def cutoffs(self) -> Tuple[Tensor, Tensor]:
        nyquist = self.sample_rate / 2
        low = ad.clamp(self.min_low_hz + ad.abs_(self.low_hz), lo=self.min_low_hz, hi=nyquist - self.min_band_hz)
        high = ad.clamp(low + self.min_band_hz + ad.abs_(self.band_hz), lo=self.min_low_hz, hi=nyquist)
        return low, high

    def filters(self) -> Tensor:
        low, high = self.cutoffs()
        dtype = low.dtype
        t = self._t_left.astype(dtype)
        denom = (np.pi * t * self.sample_rate).astype(dtype)
        left = (ad.sin(2 * np.pi * high * t) - ad.sin(2 * np.pi * low * t)) / denom
        left = left * self._window_left.astype(dtype)
        centre = 2.0 * (high - low) / self.sample_rate
        right = ad.getitem(left, (slice(None), slice(None, None, -1)))
        bank = ad.concat([left, centre, right], axis=1)
        return ad.reshape(bank, (bank.shape[0], 1, self.kernel))

    def forward(self, audio: Tensor) -> Tensor:
        """``[B, 1, N] -> [B, channels, N]`` band-passed signals."""
        return ad.conv1d(audio, self.filters(), padding=(self.kernel - 1) // 2)


class SincFrontEnd(Module):
    """Sinc filter bank, rectification, 25 ms / 10 ms averaging and log compression."""

    def __init__(self, preset: BlockPreset, rng):
        super().__init__()
        sr = preset.se_sample_rate
        self.sinc = SincConv(preset.sinc_channels, preset.sinc_kernel, sr, rng)
        self.sample_rate = sr
        self.window = int(0.025 * sr)
        self.hop = int(0.010 * sr)
        self.channels = preset.sinc_channels

    def output_length(self, n: int) -> int:
        return ad.conv1d_output_length(n, self.window, self.hop)

    def forward(self, audio: Tensor) -> Tensor:
        """``[B, N] -> [B, channels, frames]``."""
        if audio.ndim != 2:
            raise ValueError(f"sinc front end expects [B, N] samples, got {audio.shape}")
        if audio.shape[1] < self.window:
            raise ValueError(f"need at least {self.window} samples, got {audio.shape[1]}")
        y = self.sinc(ad.reshape(audio, (audio.shape[0], 1, audio.shape[1])))
        avg = np.full((self.channels, 1, self.window), 1.0 / self.window, dtype=y.dtype)
        energy = ad.conv1d(ad.abs_(y), Tensor(avg), stride=self.hop, groups=self.channels)
        return ad.log(energy + 1e-6)


# ------------------------------------------------------------------- x-vector

XVECTOR_LAYERS = ((5, 1), (3, 2), (3, 3), (1, 1), (1, 1))


class XVectorStack(Module):
    """Five dilated TDNN layers, mean+std pooling and an embedding projection."""

    receptive_field = 1 + sum((k - 1) * d for k, d in XVECTOR_LAYERS)

    def __init__(self, c_in: int, preset: BlockPreset, rng):
        super().__init__()
        widths = [c_in] + [preset.xvector_hidden] * 4 + [preset.xvector_stats]
        self.c_in = c_in
        self.convs = ModuleList(
            Conv1d(widths[i], widths[i + 1], k, rng, dilation=d) for i, (k, d) in enumerate(XVECTOR_LAYERS)
        )
        self.norms = ModuleList(BatchNorm1d(w) for w in widths[1:])
        self.embed = Linear(2 * preset.xvector_stats, preset.speaker_dim, rng)

    def stats(self, feats: Tensor) -> Tensor:
        """Mean and standard deviation over time of the top TDNN layer, ``[B, 2 * stats]``."""
        _expect(feats, 3, 1, self.c_in, "xvector_stack")
        if feats.shape[2] < self.receptive_field:
            raise ValueError(f"x-vector stack needs T >= {self.receptive_field}, got {feats.shape[2]}")
        h = feats
        for conv, norm in zip(self.convs, self.norms):
            h = norm(ad.relu(conv(h)))
        mean = ad.mean(h, axis=2, keepdims=True)
        centred = h - mean
        std = _std(ad.mean(centred * centred, axis=2))
        return ad.concat([ad.reshape(mean, mean.shape[:2]), std], axis=1)

    def forward(self, feats: Tensor) -> Tensor:
        """``[B, C, T] -> [B, speaker_dim]``."""
        return self.embed(self.stats(feats))


# ------------------------------------------------------------------ attention


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng):
        super().__init__()
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        b, t, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = ad.reshape(self.qkv(x), (b, t, 3, h, dh))
        qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        ctx = ad.scaled_dot_attention(q, k, v, mask)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng, dropout: float):
        super().__init__()
        self.norm = LayerNorm(d)
        self.up = Linear(d, mult * d, rng)
        self.down = Linear(mult * d, d, rng)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.drop(self.down(self.drop(ad.swish(self.up(self.norm(x))))))


class ConformerSelfAttention(Module):
    """Layernorm, absolute sinusoidal positions, multi-head self-attention."""

    def __init__(self, d: int, heads: int, rng, dropout: float):
        super().__init__()
        self.norm = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        u = self.norm(x) + sinusoidal_positions(x.shape[1], x.shape[2]).astype(x.dtype)
        return self.drop(self.attn(u, mask))


class ConformerConvModule(Module):
    def __init__(self, d: int, kernel: int, rng, dropout: float):
        super().__init__()
        self.norm = LayerNorm(d)
        self.pointwise_in = Conv1d(d, 2 * d, 1, rng)
        self.depthwise = Conv1d(d, d, kernel, rng, padding=(kernel - 1) // 2, groups=d)
        self.bn = BatchNorm1d(d)
        self.pointwise_out = Conv1d(d, d, 1, rng)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = _channels_first(self.norm(x))
        h = ad.glu(self.pointwise_in(h), axis=1)
        h = ad.swish(self.bn(self.depthwise(h)))
        return self.drop(_channels_first(self.pointwise_out(h)))


class ConformerBlock(Module):
    """Macaron FFN / self-attention / convolution / FFN, then layernorm."""

    def __init__(self, d: int, heads: int, ff_mult: int, kernel: int, rng, dropout: float = DROPOUT):
        super().__init__()
        self.d = d
        self.ff1 = FeedForward(d, ff_mult, rng, dropout)
        self.mhsa = ConformerSelfAttention(d, heads, rng, dropout)
        self.conv = ConformerConvModule(d, kernel, rng, dropout)
        self.ff2 = FeedForward(d, ff_mult, rng, dropout)
        self.norm = LayerNorm(d)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        _expect(x, 3, 2, self.d, "conformer_block")
        x = x + 0.5 * self.ff1(x)
        x = x + self.mhsa(x, mask)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


# -------------------------------------------------------------- FFT stacks


class FFTBlock(Module):
    """Self-attention and a kernel-3 convolutional feed-forward, each post-normed."""

    def __init__(self, d: int, heads: int, d_inner: int, kernel: int, rng, dropout: float = DROPOUT):
        super().__init__()
        pad = (kernel - 1) // 2
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.conv1 = Conv1d(d, d_inner, kernel, rng, padding=pad)
        self.conv2 = Conv1d(d_inner, d, kernel, rng, padding=pad)
        self.norm2 = LayerNorm(d)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.drop(self.attn(x)))
        h = self.conv2(ad.relu(self.conv1(_channels_first(x))))
        return self.norm2(x + self.drop(_channels_first(h)))


class FFTStack(Module):
    def __init__(self, n_stacks: int, d: int, heads: int, d_inner: int, kernel: int, rng,
                 dropout: float = DROPOUT, positions: bool = False):
        super().__init__()
        self.d = d
        self.positions = positions
        self.blocks = ModuleList(FFTBlock(d, heads, d_inner, kernel, rng, dropout) for _ in range(n_stacks))

    def __len__(self) -> int:
        return len(self.blocks)

    def forward(self, x: Tensor) -> Tensor:
        _expect(x, 3, 2, self.d, "fft_stack")
        if self.positions and len(self.blocks):
            x = x + sinusoidal_positions(x.shape[1], self.d).astype(x.dtype)
        for block in self.blocks:
            x = block(x)
        return x


# ------------------------------------------------------ time-scale changes


class Subsample4(Module):
    """Two stride-2 convolutions: ``[B, T, d_in] -> [B, ceil(T/4), d_out]``."""

    def __init__(self, d_in: int, d_out: int, rng):
        super().__init__()
        self.d_in = d_in
        self.conv1 = Conv1d(d_in, d_out, 3, rng, stride=2, padding=1)
        self.conv2 = Conv1d(d_out, d_out, 3, rng, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        _expect(x, 3, 2, self.d_in, "subsample4")
        h = ad.relu(self.conv2(ad.relu(self.conv1(_channels_first(x)))))
        return _channels_first(h)


class Upsample4(Module):
    """Two stride-2 transposed convolutions, each followed by relu: ``T -> 4T``."""

    def __init__(self, d_in: int, d_out: int, rng):
        super().__init__()
        self.d_in = d_in
        self.deconv1 = ConvTranspose1d(d_in, d_out, 4, rng, stride=2, padding=1)
        self.deconv2 = ConvTranspose1d(d_out, d_out, 4, rng, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        _expect(x, 3, 2, self.d_in, "upsample4")
        h = ad.relu(self.deconv2(ad.relu(self.deconv1(_channels_first(x)))))
        return _channels_first(h)


# ---------------------------------------------------------------- conditioning


class Condition(Module):
    """Add a projected, L2-normalised utterance embedding to every frame."""

    def __init__(self, emb_dim: int, d: int, rng):
        super().__init__()
        self.emb_dim = emb_dim
        self.proj = Linear(emb_dim, d, rng)

    def offset(self, e: Tensor) -> Tensor:
        if e.ndim == 1:
            e = ad.reshape(e, (1, -1))
        _expect(e, 2, 1, self.emb_dim, "condition")
        return self.proj(ad.l2_normalize(e, axis=-1))

    def forward(self, x: Tensor, e: Tensor) -> Tensor:
        off = self.offset(e)
        if off.shape[0] not in (1, x.shape[0]):
            raise ValueError(f"condition: batch {off.shape[0]} vs {x.shape[0]}")
        return x + ad.reshape(off, (off.shape[0], 1, off.shape[1]))
