import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from accentconv.audio import AudioBuffer, DspConfig, MelSpectrogram, PitchContour, mel_spectrogram
from accentconv.models import (
    EMBEDDING_DIMS,
    Embedding,
    KindMismatchError,
    build_bundle,
    count_parameters,
    pad_pitch,
)
from accentconv.nn import get_preset
from accentconv.vocoder import ExternalVocoder, GriffinLimVocoder

BUNDLE = build_bundle("toy", seed=0)
ABLATION = build_bundle("toy", seed=0, ablation=True)


def rand_mel(t, seed=0):
    return np.random.default_rng(seed).normal(-4.0, 1.0, size=(1, 80, t)).astype(np.float32)


def rand_emb(kind, seed):
    return Embedding(kind, np.random.default_rng(seed).standard_normal(EMBEDDING_DIMS[kind]))


def flat_pitch(n, f0=150.0):
    return PitchContour(np.full(n, f0), np.ones(n, dtype=bool))


def run_sts(bundle, t, accent=None, gender=None, speaker=None, pitch=None):
    ph = bundle.stp(rand_mel(t), accent)
    n = 4 * ph.n_steps
    speaker = speaker if speaker is not None else rand_emb("speaker", 3)
    pitch = pad_pitch(pitch if pitch is not None else flat_pitch(t), n)
    return ph, bundle.sts(ph, accent, gender, speaker, pitch).data


# ---------------------------------------------------------------- embeddings


def test_embedding_kinds_and_dims():
    acc, gen = BUNDLE.aege.embed(rand_mel(40))
    assert (acc.kind, acc.values.shape, gen.kind, gen.values.shape) == ("accent", (192,), "gender", (192,))
    with pytest.raises(ValueError):
        Embedding("speaker", np.zeros(192))
    with pytest.raises(KindMismatchError):
        BUNDLE.stp(rand_mel(16), gen)


def test_aege_logit_shapes():
    out = BUNDLE.aege(rand_mel(30))
    assert out.accent_logits.shape == (1, 40) and out.gender_logits.shape == (1, 2)


def test_speaker_encoder_deterministic_and_minimum_length():
    se = BUNDLE.se
    x = AudioBuffer(np.random.default_rng(1).standard_normal(22050) * 0.1, 22050)
    a, b = se.embed(x), se.embed(x)
    assert a.kind == "speaker" and np.array_equal(a.values, b.values)
    too_short = AudioBuffer(np.zeros(int(se.min_samples * 22050 / 16000) - 40), 22050)
    with pytest.raises(ValueError):
        se.embed(too_short)


# ------------------------------------------------------------- shape laws


@settings(max_examples=20, deadline=None)
@given(st.integers(4, 128))
def test_stp_and_sts_frame_laws(t):
    acc, gen = rand_emb("accent", 1), rand_emb("gender", 2)
    ph, mel = run_sts(BUNDLE, t, acc, gen)
    assert ph.n_steps == math.ceil(t / 4)
    assert ph.token_log_probs.shape == (1, ph.n_steps, 129)
    assert mel.shape == (1, 80, 4 * math.ceil(t / 4))


def test_stp_hundred_frames_rows_are_distributions():
    ph = BUNDLE.stp(rand_mel(100), rand_emb("accent", 1))
    lp = ph.token_log_probs.data[0]
    assert lp.shape == (25, 129)
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-5)


def test_accent_embedding_changes_token_distribution():
    a = BUNDLE.stp(rand_mel(40), rand_emb("accent", 1)).token_log_probs.data
    b = BUNDLE.stp(rand_mel(40), rand_emb("accent", 2)).token_log_probs.data
    assert not np.allclose(a, b)


def test_zero_conditioning_is_finite_and_speaker_matters():
    zeros = Embedding("speaker", np.zeros(512))
    _, base = run_sts(BUNDLE, 24, Embedding("accent", np.zeros(192)), Embedding("gender", np.zeros(192)),
                      zeros, PitchContour(np.zeros(24), np.zeros(24, dtype=bool)))
    assert np.all(np.isfinite(base))
    acc, gen = rand_emb("accent", 1), rand_emb("gender", 2)
    _, one = run_sts(BUNDLE, 24, acc, gen, rand_emb("speaker", 5))
    _, two = run_sts(BUNDLE, 24, acc, gen, rand_emb("speaker", 6))
    assert one.shape == two.shape and not np.allclose(one, two)


def test_missing_required_embedding_rejected():
    ph = BUNDLE.stp(rand_mel(16), rand_emb("accent", 1))
    with pytest.raises(ValueError):
        BUNDLE.sts(ph, rand_emb("accent", 1), None, rand_emb("speaker", 1), pad_pitch(flat_pitch(16), 16))


# ------------------------------------------------------------------ ablation


def test_ablation_ignores_accent_and_gender():
    _, ref = run_sts(ABLATION, 32)
    for s in range(3):
        ph, out = run_sts(ABLATION, 32, rand_emb("accent", 10 + s), rand_emb("gender", 20 + s))
        assert np.array_equal(out, ref)
    assert ABLATION.aege is None
    names = set(ABLATION.state_dict())
    assert not any("accent" in n or "gender" in n for n in names)


# ------------------------------------------------------------ parameter count


def xvector_oracle(c, hidden, stats, spk):
    # sinc (low, band) per channel; conv weights+bias; batch-norm affine; projection
    widths = [c, hidden, hidden, hidden, hidden, stats]
    kernels = [5, 3, 3, 1, 1]
    convs = sum(widths[i] * widths[i + 1] * k + widths[i + 1] for i, k in enumerate(kernels))
    norms = 2 * sum(widths[1:])
    return 2 * c + convs + norms + 2 * stats * spk + spk


def test_speaker_encoder_count_matches_closed_form():
    p = get_preset("toy")
    expected = xvector_oracle(p.sinc_channels, p.xvector_hidden, p.xvector_stats, p.speaker_dim)
    assert count_parameters(BUNDLE)["SE"] == expected == 238280


def test_freezing_removes_trainable_parameters():
    b = build_bundle("toy", seed=0)
    before = count_parameters(b)
    b.aege.freeze()
    after = count_parameters(b)
    assert after["AE/GE"] == 0 and after["STP"] == before["STP"]
    assert after["Full STS"] == before["Full STS"] - before["AE/GE"]
    assert count_parameters(b, trainable_only=False)["AE/GE"] == before["AE/GE"]


def test_bundle_state_transfer_reproduces_outputs():
    b = build_bundle("toy", seed=1)
    b.load_state_dict(BUNDLE.state_dict())
    mel = rand_mel(20)
    assert np.array_equal(b.stp(mel, rand_emb("accent", 1)).token_log_probs.data,
                          BUNDLE.stp(mel, rand_emb("accent", 1)).token_log_probs.data)


# ------------------------------------------------------------------ vocoder


def test_vocoder_recovers_tone_frequency():
    cfg = DspConfig()
    n = cfg.sample_rate
    tone = AudioBuffer(0.5 * np.sin(2 * np.pi * 440.0 * np.arange(n) / n), n)
    out = GriffinLimVocoder(cfg)(mel_spectrogram(tone, cfg))
    mel = mel_spectrogram(tone, cfg)
    assert len(out) == (mel.n_frames - 1) * cfg.hop_size
    spec = np.abs(np.fft.rfft(out.samples * np.hanning(len(out))))
    peak = np.argmax(spec) * n / len(out)
    assert abs(peak - 440.0) < 15.0


def test_vocoder_silence_and_zero_iterations():
    cfg = DspConfig()
    floor = np.full((80, 12), math.log(cfg.log_floor))
    out = GriffinLimVocoder(cfg)(MelSpectrogram(floor, cfg))
    assert np.sqrt(np.mean(out.samples ** 2)) < 1e-6
    quick = GriffinLimVocoder(cfg, iters=0)(MelSpectrogram(rand_mel(12)[0], cfg))
    assert len(quick) == 11 * cfg.hop_size


def test_external_vocoder_length_check():
    cfg = DspConfig()
    good = ExternalVocoder(lambda m: np.zeros((m.shape[1] - 1) * cfg.hop_size), cfg)
    assert len(good(MelSpectrogram(rand_mel(5)[0], cfg))) == 4 * cfg.hop_size
    bad = ExternalVocoder(lambda m: np.zeros(7), cfg)
    with pytest.raises(ValueError):
        bad(MelSpectrogram(rand_mel(5)[0], cfg))
