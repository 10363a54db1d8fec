import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from accentconv.audio import AudioBuffer, PitchContour
from accentconv.models import Embedding, build_bundle
from accentconv.pipeline import (
    LatencyReport,
    PitchPolicy,
    StreamConfig,
    VoiceProfile,
    benchmark,
    convert,
    expected_output_samples,
    profile_from_audio,
    split_chunks,
    stream_convert,
)
from accentconv.synth import make_accent, make_voice, synthesize

SR = 22050
HOP = 256
BUNDLE = build_bundle("toy", seed=0)


def speech(text="the cat runs", speaker=0, accent=0, seed=0):
    return synthesize(text, make_voice(speaker), make_accent(accent), np.random.default_rng(seed))


def clip(seconds, seed=0):
    a = speech("a big dog sees the fish", seed=seed)
    n = int(seconds * SR)
    return AudioBuffer(np.resize(a.samples, n), SR)


PROFILE = profile_from_audio(BUNDLE, speech())


# ---------------------------------------------------------------- profiles


def test_profile_shapes_and_determinism():
    a = speech()
    p, q = profile_from_audio(BUNDLE, a), profile_from_audio(BUNDLE, a)
    assert [e.values.shape for e in (p.accent_emb, p.gender_emb, p.speaker_emb)] == [(192,), (192,), (512,)]
    assert np.array_equal(p.speaker_emb.values, q.speaker_emb.values)
    assert p.pitch_policy.kind == "passthrough"


def test_profile_rejects_wrong_kinds_and_bad_policies():
    spk = Embedding("speaker", np.ones(512))
    with pytest.raises(ValueError):
        VoiceProfile(spk, accent_emb=Embedding("gender", np.ones(192)))
    with pytest.raises(ValueError):
        PitchPolicy("scale", 0.0)
    with pytest.raises(ValueError):
        PitchPolicy("warble")


def test_profile_too_short_rejected():
    with pytest.raises(ValueError):
        profile_from_audio(BUNDLE, AudioBuffer(np.zeros(500), SR))


def test_pitch_policies():
    p = PitchContour(np.array([0.0, 100.0, 200.0]), np.array([False, True, True]))
    assert np.array_equal(PitchPolicy("flat", 150.0).apply(p).f0, [0.0, 150.0, 150.0])
    assert np.array_equal(PitchPolicy("scale", 1.5).apply(p).f0, [0.0, 150.0, 300.0])
    assert PitchPolicy().apply(p) is p


# ----------------------------------------------------------------- convert


@settings(max_examples=8, deadline=None)
@given(st.integers(300, 30000))
def test_duration_preserved(n):
    # a fixed profile lets clips shorter than the speaker encoder's minimum through
    a = AudioBuffer(np.resize(speech().samples, n), SR)
    out = convert(BUNDLE, a, PROFILE)
    t = n // HOP + 1
    assert out.sample_rate == SR
    assert len(out) == expected_output_samples(n, HOP) == HOP * (4 * math.ceil(t / 4) - 1)
    assert abs(len(out) - n) <= 4 * HOP + HOP


def test_two_second_input_length():
    out = convert(BUNDLE, clip(2.0))
    assert abs(len(out) - 2 * SR) <= 3 * HOP + HOP


def test_voice_cloning_path_changes_audio_not_length():
    b_audio = speech(speaker=1, accent=1, seed=3)
    own = convert(BUNDLE, b_audio)
    other = profile_from_audio(BUNDLE, speech(speaker=0, seed=4))
    cloned = convert(BUNDLE, b_audio, other)
    assert len(cloned) == len(own) and not np.allclose(cloned.samples, own.samples)
    self_profile = profile_from_audio(BUNDLE, b_audio)
    swapped = convert(BUNDLE, b_audio, self_profile.with_overrides(speaker_emb=other.speaker_emb))
    assert len(swapped) == len(own) and not np.allclose(swapped.samples, own.samples)


def test_ablation_bundle_converts():
    ab = build_bundle("toy", seed=0, ablation=True)
    p = profile_from_audio(ab, speech())
    assert p.accent_emb is None and p.gender_emb is None
    assert len(convert(ab, speech())) == expected_output_samples(len(speech()), HOP)


def test_convert_rejects_bad_input():
    with pytest.raises(ValueError):
        convert(BUNDLE, AudioBuffer(np.zeros(0), SR))
    with pytest.raises(ValueError):
        convert(BUNDLE, AudioBuffer(np.zeros(16000), 16000))


# --------------------------------------------------------------- streaming


def test_single_chunk_stream_equals_convert():
    a = AudioBuffer(speech().samples[:4000], SR)
    res = stream_convert(BUNDLE, [a])
    assert len(res.chunks) == 1
    assert np.array_equal(res.chunks[0].samples, convert(BUNDLE, a).samples)


def test_five_chunk_stream():
    a = clip(1.0)
    chunks = split_chunks(a, 0.2)
    res = stream_convert(BUNDLE, chunks)
    assert len(chunks) == len(res.chunks) == 5
    assert abs(len(res.joined()) - len(a)) <= 5 * HOP
    assert res.report.iterations == 5


def test_left_context_only_changes_values():
    chunks = split_chunks(clip(0.6), 0.2)
    with_ctx = stream_convert(BUNDLE, chunks, StreamConfig(left_context_frames=8))
    no_ctx = stream_convert(BUNDLE, chunks, StreamConfig(left_context_frames=0))
    assert len(with_ctx.chunks) == len(no_ctx.chunks)
    # the first chunk has no history, so context cannot reach it
    assert np.array_equal(with_ctx.chunks[0].samples, no_ctx.chunks[0].samples)
    assert [len(c) for c in with_ctx.chunks] == [len(c) for c in no_ctx.chunks]


def test_enrollment_profile_is_used_throughout():
    enroll = speech(speaker=1, seed=9)
    res = stream_convert(BUNDLE, split_chunks(clip(0.4), 0.2),
                         StreamConfig(profile_source="enrollment", enrollment=enroll))
    assert np.array_equal(res.profile.speaker_emb.values, profile_from_audio(BUNDLE, enroll).speaker_emb.values)


def test_stream_errors():
    with pytest.raises(ValueError):
        StreamConfig(chunk_seconds=0.5)
    good = AudioBuffer(speech().samples[:4410], SR)
    with pytest.raises(ValueError, match="hop"):
        stream_convert(BUNDLE, [good, AudioBuffer(np.zeros(100), SR)])
    with pytest.raises(ValueError):
        stream_convert(BUNDLE, [])


# --------------------------------------------------------------- benchmark


def test_benchmark_single_iteration():
    a = clip(0.5)
    rep = benchmark(BUNDLE, a, iterations=1)
    assert rep.iterations == 1 and rep.p50_ms == rep.p95_ms == rep.latencies_ms[0]
    assert rep.precomputed_profile is not None and rep.precomputed_profile.iterations == 1
    assert "precomputed_profile" in rep.summary()
    with pytest.raises(ValueError):
        benchmark(BUNDLE, a, iterations=0)


def test_rtfx_is_audio_over_wall():
    rep = LatencyReport((100.0, 300.0), audio_seconds=2.0, wall_seconds=0.4)
    assert rep.rtfx == pytest.approx(5.0)
    assert rep.mean_ms == 200.0 and rep.p50_ms == 200.0
    assert rep.p95_ms == pytest.approx(np.percentile([100.0, 300.0], 95))
