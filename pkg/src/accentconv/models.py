"""The five networks: accent/gender encoder, speaker encoder, speech-to-phonetics,
phonetics-to-speech, and the vocoder stand-in, plus the bundle that wires them.

Tensor layouts: mels enter as ``[B, n_mels, T]``; sequence models work on
``[B, T, d]``; embeddings are ``[B, dim]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np

from . import autodiff as ad
from .audio import AudioBuffer, DspConfig, MelSpectrogram, PitchContour, resample
from .autodiff import Tensor
from .nn import (
    AttentivePoolingDecoder,
    BlockPreset,
    Condition,
    ConformerBlock,
    Conv1d,
    FFTStack,
    JasperStack,
    Linear,
    Module,
    ModuleList,
    SincFrontEnd,
    Subsample4,
    Upsample4,
    XVectorStack,
    get_preset,
    uniform_param,
)
from .vocoder import GriffinLimVocoder, Vocoder

EMBEDDING_DIMS = {"accent": 192, "gender": 192, "speaker": 512}
F0_SCALE = 400.0


class KindMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Embedding:
    """A fixed-length utterance vector tagged with what it describes."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in EMBEDDING_DIMS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape != (EMBEDDING_DIMS[self.kind],):
            raise ValueError(f"{self.kind} embedding must have {EMBEDDING_DIMS[self.kind]} values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding values must be finite")
        object.__setattr__(self, "values", v)

    def as_tensor(self, dtype=None) -> Tensor:
        return ad.as_tensor(self.values[None, :], dtype=dtype)


EmbeddingLike = Union[Embedding, Tensor, np.ndarray, None]


def _embedding_tensor(e: EmbeddingLike, kind: str, dtype) -> Optional[Tensor]:
    if e is None:
        return None
    if isinstance(e, Embedding):
        if e.kind != kind:
            raise KindMismatchError(f"expected a {kind} embedding, got {e.kind}")
        return e.as_tensor(dtype)
    t = e if isinstance(e, Tensor) else ad.as_tensor(np.asarray(e), dtype=dtype)
    if t.ndim == 1:
        t = ad.reshape(t, (1, -1))
    if t.shape[-1] != EMBEDDING_DIMS[kind]:
        raise KindMismatchError(f"{kind} embedding must have {EMBEDDING_DIMS[kind]} values, got {t.shape}")
    return t


def _mel_tensor(mel, n_mels: int) -> Tensor:
    if isinstance(mel, MelSpectrogram):
        mel = mel.bands
    t = mel if isinstance(mel, Tensor) else ad.as_tensor(np.asarray(mel))
    if t.ndim == 2:
        t = ad.reshape(t, (1,) + t.shape)
    if t.ndim != 3 or t.shape[1] != n_mels:
        raise ValueError(f"mel must be [B, {n_mels}, T], got {t.shape}")
    if t.shape[2] == 0:
        raise ValueError("mel has no frames")
    return t


# ---------------------------------------------------------------------- AE/GE


@dataclass
class AegeOutput:
    accent_logits: Tensor
    gender_logits: Tensor
    accent_emb: Tensor
    gender_emb: Tensor


class AccentGenderEncoder(Module):
    """Shared Jasper trunk with parallel accent and gender pooling decoders."""

    def __init__(self, preset: BlockPreset, rng=None):
        super().__init__()
        self.preset = preset
        self.jasper = JasperStack(preset, rng)
        c = self.jasper.out_channels
        self.accent_decoder = AttentivePoolingDecoder(
            c, preset.pooling_attention, preset.accent_dim, preset.n_accents, rng, preset.decoder_kernel)
        self.gender_decoder = AttentivePoolingDecoder(
            c, preset.pooling_attention, preset.accent_dim, preset.n_genders, rng, preset.decoder_kernel)

    def forward(self, mel) -> AegeOutput:
        h = self.jasper(_mel_tensor(mel, self.preset.n_mels))
        accent_emb, accent_logits = self.accent_decoder(h)
        gender_emb, gender_logits = self.gender_decoder(h)
        return AegeOutput(accent_logits, gender_logits, accent_emb, gender_emb)

    def embed(self, mel) -> tuple:
        with ad.no_grad():
            out = self(mel)
        return Embedding("accent", out.accent_emb.data[0]), Embedding("gender", out.gender_emb.data[0])


# ------------------------------------------------------------------------ SE


class SpeakerEncoder(Module):
    """Sinc front end on raw 16 kHz samples followed by an x-vector stack."""

    def __init__(self, preset: BlockPreset, rng=None):
        super().__init__()
        self.preset = preset
        self.front = SincFrontEnd(preset, rng)
        self.xvector = XVectorStack(preset.sinc_channels, preset, rng)

    @property
    def sample_rate(self) -> int:
        return self.preset.se_sample_rate

    @property
    def min_samples(self) -> int:
        """Shortest 16 kHz input whose frames cover the x-vector receptive field."""
        return self.front.window + (XVectorStack.receptive_field - 1) * self.front.hop

    def forward(self, samples: Tensor) -> Tensor:
        """``[B, N]`` samples at the SE rate -> ``[B, speaker_dim]``."""
        if samples.ndim != 2 or samples.shape[1] < self.min_samples:
            raise ValueError(f"speaker encoder needs [B, N >= {self.min_samples}] samples, got {samples.shape}")
        return self.xvector(self.front(samples))

    def prepare(self, audio: AudioBuffer) -> np.ndarray:
        """Resample to the SE rate; rejects clips that are too short."""
        x = resample(audio, self.sample_rate).samples if audio.sample_rate != self.sample_rate else audio.samples
        if len(x) < self.min_samples:
            raise ValueError(
                f"audio too short for the speaker encoder: need {self.min_samples / self.sample_rate:.3f} s, "
                f"got {len(audio) / audio.sample_rate:.3f} s")
        return x

    def embed(self, audio: AudioBuffer) -> Embedding:
        x = self.prepare(audio)
        with ad.no_grad():
            e = self(ad.as_tensor(x[None, :]))
        return Embedding("speaker", e.data[0])


class AAMHead(Module):
    """Speaker class weights used only while training the speaker encoder."""

    def __init__(self, n_speakers: int, dim: int, rng=None):
        super().__init__()
        self.weight = uniform_param(rng, (n_speakers, dim), 1.0 / np.sqrt(dim))


# ----------------------------------------------------------------------- STP


@dataclass
class PhoneticFeatures:
    """Accent-encoder frames ``[B, T', d]`` and token log-probabilities ``[B, T', V+1]``."""

    frames: Tensor
    token_log_probs: Tensor
    source_frames: int

    @property
    def n_steps(self) -> int:
        return self.frames.shape[1]


class SpeechToPhonetics(Module):
    """Subsample x4, Conformer stack, accent conditioning, accent encoder, token head."""

    def __init__(self, preset: BlockPreset, rng=None, ablation: bool = False):
        super().__init__()
        self.preset = preset
        self.ablation = ablation
        d = preset.stp_dim
        self.subsample = Subsample4(preset.n_mels, d, rng)
        self.conformers = ModuleList(
            ConformerBlock(d, preset.conformer_heads, preset.conformer_ff_mult, preset.conformer_kernel, rng,
                           preset.dropout)
            for _ in range(preset.conformer_layers)
        )
        if not ablation:
            self.accent_condition = Condition(preset.accent_dim, d, rng)
            self.accent_encoder = FFTStack(preset.stp_accent_layers, d, preset.conformer_heads,
                                           preset.stp_accent_inner, preset.fft_kernel, rng, preset.dropout)
        self.head = Conv1d(d, preset.n_tokens, 1, rng)

    def forward(self, mel, accent_emb: EmbeddingLike = None) -> PhoneticFeatures:
        x = _mel_tensor(mel, self.preset.n_mels)
        h = self.subsample(ad.swapaxes(x, 1, 2))
        for block in self.conformers:
            h = block(h)
        if not self.ablation:
            e = _embedding_tensor(accent_emb, "accent", h.dtype)
            if e is None:
                raise KindMismatchError("the speech-to-phonetics model needs an accent embedding")
            h = self.accent_encoder(self.accent_condition(h, e))
        logits = ad.swapaxes(self.head(ad.swapaxes(h, 1, 2)), 1, 2)
        return PhoneticFeatures(h, ad.log_softmax(logits, axis=-1), x.shape[2])


# ----------------------------------------------------------------------- STS


def pitch_features(pitch, n_frames: int, dtype=np.float32) -> np.ndarray:
    """``[1, n_frames, 2]`` of ``[f0 / 400, voiced]``; the contour must match the grid."""
    if isinstance(pitch, PitchContour):
        f0, voiced = pitch.f0, pitch.voiced
    else:
        f0 = np.asarray(pitch, dtype=np.float64)
        voiced = f0 > 0
    if len(f0) != n_frames:
        raise ValueError(f"pitch has {len(f0)} frames, the spectrogram grid has {n_frames}")
    feats = np.stack([np.asarray(f0) / F0_SCALE, np.asarray(voiced, dtype=np.float64)], axis=-1)
    return feats[None].astype(dtype)


def pad_pitch(pitch: PitchContour, n_frames: int) -> PitchContour:
    """Extend a contour with unvoiced frames (or trim it) to ``n_frames``."""
    f0 = np.zeros(n_frames)
    k = min(n_frames, len(pitch.f0))
    f0[:k] = pitch.f0[:k]
    return PitchContour(f0, f0 > 0)


class PhoneticsToSpeech(Module):
    """Upsample x4, encoder, accent branch and speaker branch, decoder, mel projection."""

    def __init__(self, preset: BlockPreset, rng=None, ablation: bool = False):
        super().__init__()
        self.preset = preset
        self.ablation = ablation
        d, inner, heads, k = preset.sts_dim, preset.sts_inner, preset.sts_heads, preset.fft_kernel
        self.upsample = Upsample4(preset.stp_dim, d, rng)
        self.encoder = FFTStack(preset.sts_encoder_layers, d, heads, inner, k, rng, preset.dropout, positions=True)
        if not ablation:
            self.accent_condition = Condition(preset.accent_dim, d, rng)
            self.accent_encoder = FFTStack(preset.sts_accent_layers, d, heads, inner, k, rng, preset.dropout)
            self.gender_condition = Condition(preset.accent_dim, d, rng)
        self.pitch_proj = Linear(2, d, rng)
        self.speaker_condition = Condition(preset.speaker_dim, d, rng)
        self.speaker_encoder = FFTStack(preset.sts_speaker_layers, d, heads, inner, k, rng, preset.dropout)
        self.decoder = FFTStack(preset.sts_decoder_layers, d, heads, inner, k, rng, preset.dropout)
        self.to_mel = Linear(d, preset.n_mels, rng)

    def forward(self, ph: Union[PhoneticFeatures, Tensor], accent_emb: EmbeddingLike, gender_emb: EmbeddingLike,
                speaker_emb: EmbeddingLike, pitch) -> Tensor:
        """Returns the predicted log-mel ``[B, n_mels, 4 T']``."""
        frames = ph.frames if isinstance(ph, PhoneticFeatures) else ph
        if frames.ndim != 3 or frames.shape[2] != self.preset.stp_dim:
            raise ValueError(f"phonetic frames must be [B, T', {self.preset.stp_dim}], got {frames.shape}")
        h = self.encoder(self.upsample(frames))
        n = h.shape[1]
        p = pitch if isinstance(pitch, np.ndarray) and pitch.ndim == 3 else pitch_features(pitch, n, h.dtype)
        if p.shape[1:] != (n, 2):
            raise ValueError(f"pitch features must be [B, {n}, 2], got {p.shape}")
        spk = _embedding_tensor(speaker_emb, "speaker", h.dtype)
        if spk is None:
            raise KindMismatchError("a speaker embedding is required")
        branch_b = self.speaker_condition(h + self.pitch_proj(Tensor(p.astype(h.dtype))), spk)
        if self.ablation:
            branch_a = h
        else:
            acc = _embedding_tensor(accent_emb, "accent", h.dtype)
            gen = _embedding_tensor(gender_emb, "gender", h.dtype)
            if acc is None or gen is None:
                raise KindMismatchError("accent and gender embeddings are required outside ablation mode")
            branch_a = self.accent_encoder(self.accent_condition(h, acc))
            branch_b = self.gender_condition(branch_b, gen)
        y = self.to_mel(self.decoder(branch_a + self.speaker_encoder(branch_b)))
        return ad.swapaxes(y, 1, 2)


# ------------------------------------------------------------------- bundle


@dataclass
class ModelBundle:
    """Every network needed for conversion.

    In ablation mode ``aege`` is None and the STP/STS models are built
    without their accent and gender paths.
    """

    preset: BlockPreset
    se: SpeakerEncoder
    stp: SpeechToPhonetics
    sts: PhoneticsToSpeech
    aege: Optional[AccentGenderEncoder] = None
    vocoder: Vocoder = field(default_factory=GriffinLimVocoder)
    ablation: bool = False
    dsp: DspConfig = field(default_factory=DspConfig)
    trained_stages: set = field(default_factory=set)

    def __post_init__(self):
        if self.ablation != (self.aege is None):
            raise ValueError("ablation bundles have no accent/gender encoder and full bundles need one")
        if self.stp.ablation != self.ablation or self.sts.ablation != self.ablation:
            raise ValueError("STP/STS ablation flags disagree with the bundle")
        if self.dsp.n_mels != self.preset.n_mels:
            raise ValueError("DSP config and preset disagree on the number of mel bands")

    def models(self) -> Dict[str, Module]:
        named = {"aege": self.aege, "se": self.se, "stp": self.stp, "sts": self.sts}
        return {k: v for k, v in named.items() if v is not None}

    def eval(self) -> "ModelBundle":
        for m in self.models().values():
            m.eval()
        return self

    def freeze(self) -> "ModelBundle":
        for m in self.models().values():
            m.freeze()
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for prefix, model in self.models().items():
            for name, value in model.state_dict().items():
                state[f"{prefix}.{name}"] = value
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        groups: Dict[str, dict] = {k: {} for k in self.models()}
        for name, value in state.items():
            prefix, _, rest = name.partition(".")
            if prefix not in groups:
                raise KeyError(f"unexpected entry {name!r} in state")
            groups[prefix][rest] = value
        for prefix, model in self.models().items():
            try:
                model.load_state_dict(groups[prefix])
            except (KeyError, ValueError) as exc:
                raise type(exc)(f"{prefix}: {exc.args[0]}") from None


def build_bundle(preset: Union[str, BlockPreset] = "toy", seed: Optional[int] = 0, ablation: bool = False,
                 dsp: Optional[DspConfig] = None, vocoder: Optional[Vocoder] = None, **overrides) -> ModelBundle:
    """Construct all models with weights drawn from ``seed`` (``None`` gives zero weights)."""
    if isinstance(preset, str):
        preset = get_preset(preset, **overrides)
    elif overrides:
        from dataclasses import replace

        preset = replace(preset, **overrides)
    rng = None if seed is None else np.random.default_rng(seed)
    aege = None if ablation else AccentGenderEncoder(preset, rng)
    se = SpeakerEncoder(preset, rng)
    stp = SpeechToPhonetics(preset, rng, ablation)
    sts = PhoneticsToSpeech(preset, rng, ablation)
    dsp = dsp or DspConfig(n_mels=preset.n_mels)
    return ModelBundle(preset, se, stp, sts, aege, vocoder or GriffinLimVocoder(dsp), ablation, dsp).eval()


PUBLISHED_MILLIONS = {"AE/GE": 24.9, "SE": 4.3, "STP": 82.1, "STS": 52.7, "Full STS": 164.0, "Vocoder": 84.7}


def count_parameters(bundle: ModelBundle, trainable_only: bool = True) -> Dict[str, int]:
    """Scalar parameter counts per model; ``Full STS`` sums the four networks."""
    counts = {
        "AE/GE": bundle.aege.num_parameters(trainable_only) if bundle.aege is not None else 0,
        "SE": bundle.se.num_parameters(trainable_only),
        "STP": bundle.stp.num_parameters(trainable_only),
        "STS": bundle.sts.num_parameters(trainable_only),
    }
    counts["Full STS"] = sum(counts.values())
    counts["Vocoder"] = bundle.vocoder.num_parameters() if hasattr(bundle.vocoder, "num_parameters") else 0
    return counts
