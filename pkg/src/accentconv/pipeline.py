"""End-to-end conversion, chunked streaming and latency measurement."""

from __future__ import annotations

import math
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .audio import F0_MAX, F0_MIN, AudioBuffer, MelSpectrogram, PitchContour, extract_pitch, mel_spectrogram
from .models import Embedding, ModelBundle, pad_pitch

PUBLISHED_LATENCY_MS = 52.0
PUBLISHED_RTFX = 96.0


# ------------------------------------------------------------------ profiles


@dataclass(frozen=True)
class PitchPolicy:
    """``passthrough`` keeps the source contour, ``flat`` pins voiced frames to
    ``value`` Hz, ``scale`` multiplies them by ``value``."""

    kind: str = "passthrough"
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("passthrough", "flat", "scale"):
            raise ValueError(f"unknown pitch policy {self.kind!r}")
        if self.kind == "scale" and not self.value > 0:
            raise ValueError("pitch scale must be positive")
        if self.kind == "flat" and not F0_MIN <= self.value <= F0_MAX:
            raise ValueError(f"flat pitch must lie in [{F0_MIN}, {F0_MAX}] Hz")

    def apply(self, pitch: PitchContour) -> PitchContour:
        if self.kind == "passthrough":
            return pitch
        f0 = np.where(pitch.voiced, self.value if self.kind == "flat" else pitch.f0 * self.value, 0.0)
        f0 = np.where(pitch.voiced, np.clip(f0, F0_MIN, F0_MAX), 0.0)
        return PitchContour(f0, pitch.voiced.copy())


@dataclass(frozen=True)
class VoiceProfile:
    speaker_emb: Embedding
    accent_emb: Optional[Embedding] = None
    gender_emb: Optional[Embedding] = None
    pitch_policy: PitchPolicy = PitchPolicy()

    def __post_init__(self):
        for name, kind in (("speaker_emb", "speaker"), ("accent_emb", "accent"), ("gender_emb", "gender")):
            e = getattr(self, name)
            if e is not None and (not isinstance(e, Embedding) or e.kind != kind):
                raise ValueError(f"{name} must be a {kind} embedding")

    def with_overrides(self, **kwargs) -> "VoiceProfile":
        return replace(self, **kwargs)


def _check_input(bundle: ModelBundle, audio: AudioBuffer) -> None:
    if audio.sample_rate != bundle.dsp.sample_rate:
        raise ValueError(f"expected {bundle.dsp.sample_rate} Hz audio, got {audio.sample_rate} Hz")
    if len(audio) == 0:
        raise ValueError("audio is empty")


def profile_from_audio(bundle: ModelBundle, sample: AudioBuffer) -> VoiceProfile:
    """Accent, gender and speaker embeddings copied from ``sample``."""
    _check_input(bundle, sample)
    speaker = bundle.se.embed(sample)
    if bundle.aege is None:
        return VoiceProfile(speaker)
    accent, gender = bundle.aege.embed(mel_spectrogram(sample, bundle.dsp))
    return VoiceProfile(speaker, accent, gender)


# ------------------------------------------------------------------- convert


def expected_output_samples(n_samples: int, hop: int) -> int:
    t = n_samples // hop + 1
    return hop * (4 * math.ceil(t / 4) - 1)


def convert_mel(bundle: ModelBundle, audio: AudioBuffer, profile: VoiceProfile) -> MelSpectrogram:
    """Source audio to the predicted target mel (no vocoding)."""
    _check_input(bundle, audio)
    mel = mel_spectrogram(audio, bundle.dsp)
    pitch = profile.pitch_policy.apply(extract_pitch(audio, bundle.dsp))
    with ad.no_grad():
        ph = bundle.stp(mel, profile.accent_emb)
        pitch = pad_pitch(pitch, 4 * ph.n_steps)
        out = bundle.sts(ph, profile.accent_emb, profile.gender_emb, profile.speaker_emb, pitch)
    bands = np.asarray(out.data[0], dtype=np.float64)
    return MelSpectrogram(np.maximum(bands, math.log(bundle.dsp.log_floor)), bundle.dsp)


def convert(bundle: ModelBundle, audio: AudioBuffer, profile: Optional[VoiceProfile] = None) -> AudioBuffer:
    """Convert ``audio``; the voice profile defaults to the source's own."""
    _check_input(bundle, audio)
    if profile is None:
        profile = profile_from_audio(bundle, audio)
    return bundle.vocoder(convert_mel(bundle, audio, profile))


# ------------------------------------------------------------------ latency


@dataclass(frozen=True)
class LatencyReport:
    latencies_ms: Tuple[float, ...]
    audio_seconds: float
    wall_seconds: float
    precomputed_profile: Optional["LatencyReport"] = None

    @property
    def iterations(self) -> int:
        return len(self.latencies_ms)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.latencies_ms))

    @property
    def p50_ms(self) -> float:
        return float(np.percentile(self.latencies_ms, 50))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.latencies_ms, 95))

    @property
    def rtfx(self) -> float:
        """Seconds of audio processed per second of wall time."""
        return self.audio_seconds / self.wall_seconds if self.wall_seconds > 0 else math.inf

    def summary(self) -> dict:
        out = {
            "iterations": self.iterations,
            "mean_ms": self.mean_ms,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "rtfx": self.rtfx,
            "audio_seconds": self.audio_seconds,
            "wall_seconds": self.wall_seconds,
        }
        if self.precomputed_profile is not None:
            out["precomputed_profile"] = self.precomputed_profile.summary()
        return out


def _timed_runs(fn, iterations: int, warmup: int) -> List[float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def benchmark(bundle: ModelBundle, audio: AudioBuffer, iterations: int = 200, warmup: int = 1) -> LatencyReport:
    """Time ``convert`` over ``iterations`` runs after ``warmup`` discarded runs.

    The main report includes embedding extraction on every run; the nested
    ``precomputed_profile`` report reuses one profile computed up front.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    _check_input(bundle, audio)
    with_profile = _timed_runs(lambda: convert(bundle, audio), iterations, warmup)
    profile = profile_from_audio(bundle, audio)
    fixed = _timed_runs(lambda: convert(bundle, audio, profile), iterations, warmup)

    def report(times, nested=None):
        return LatencyReport(tuple(t * 1e3 for t in times), audio.duration * len(times), float(sum(times)), nested)

    return report(with_profile, report(fixed))


# ---------------------------------------------------------------- streaming


@dataclass(frozen=True)
class StreamConfig:
    chunk_seconds: float = 0.2
    left_context_frames: int = 8
    profile_source: str = "first_chunk"
    enrollment: Optional[AudioBuffer] = None
    queue_size: int = 1

    def __post_init__(self):
        if not 0 < self.chunk_seconds <= 0.2:
            raise ValueError("chunk_seconds must lie in (0, 0.2]")
        if self.left_context_frames < 0:
            raise ValueError("left_context_frames must be >= 0")
        if self.profile_source not in ("first_chunk", "enrollment"):
            raise ValueError(f"unknown profile source {self.profile_source!r}")
        if self.profile_source == "enrollment" and self.enrollment is None:
            raise ValueError("an enrollment clip is required for profile_source='enrollment'")


def split_chunks(audio: AudioBuffer, chunk_seconds: float = 0.2) -> List[AudioBuffer]:
    n = max(1, int(round(chunk_seconds * audio.sample_rate)))
    return [AudioBuffer(audio.samples[i:i + n], audio.sample_rate) for i in range(0, len(audio), n)] or [audio]


@dataclass
class StreamResult:
    chunks: List[AudioBuffer]
    report: LatencyReport
    profile: VoiceProfile

    def joined(self) -> AudioBuffer:
        return AudioBuffer(np.concatenate([c.samples for c in self.chunks]), self.chunks[0].sample_rate)


_DONE = object()


@dataclass
class _Job:
    index: int
    audio: AudioBuffer
    context_samples: int
    n_input: int
    is_last: bool
    started: float
    mel: Optional[MelSpectrogram] = None
    out: Optional[AudioBuffer] = None


class _Failure:
    def __init__(self, exc: BaseException):
        self.exc = exc


def stream_convert(bundle: ModelBundle, source: Iterable[AudioBuffer], cfg: StreamConfig = StreamConfig()) -> StreamResult:
    """Convert a chunk sequence with a three-stage threaded pipeline.

    Stages (ingest, model forward, vocode) hand jobs over bounded queues, so
    at most ``queue_size`` chunks wait between stages and order is kept. Each
    chunk is converted on its own with up to ``left_context_frames`` hops of
    preceding input prepended; output covering that context is dropped.
    Every chunk but the last is then cut or zero-padded to its input length;
    the last chunk keeps its natural length, so a one-chunk stream equals
    :func:`convert`.
    """
    hop = bundle.dsp.hop_size
    chunks = iter(source)
    try:
        first = next(chunks)
    except StopIteration:
        raise ValueError("the stream has no chunks") from None
    if cfg.profile_source == "enrollment":
        profile = profile_from_audio(bundle, cfg.enrollment)
    else:
        _check_input(bundle, first)
        profile = profile_from_audio(bundle, first)

    q_model: "queue.Queue" = queue.Queue(maxsize=cfg.queue_size)
    q_vocode: "queue.Queue" = queue.Queue(maxsize=cfg.queue_size)
    results: List[Tuple[_Job, float]] = []
    failure: List[BaseException] = []
    stop = threading.Event()

    def rest():
        for c in chunks:
            if stop.is_set():
                return
            yield c

    def make_job(index, chunk: AudioBuffer, history: np.ndarray, is_last: bool) -> _Job:
        _check_input(bundle, chunk)
        if len(chunk) < hop:
            raise ValueError(f"chunk {index} has {len(chunk)} samples; at least one hop ({hop}) is required")
        samples = np.concatenate([history, chunk.samples]) if len(history) else chunk.samples
        return _Job(index, AudioBuffer(samples, chunk.sample_rate), len(history), len(chunk), is_last,
                    time.perf_counter())

    # every stage drains its input until _DONE, so blocking puts cannot deadlock
    def ingest():
        try:
            keep = cfg.left_context_frames * hop
            history = np.zeros(0)
            pending, index = first, 0
            for nxt in rest():
                q_model.put(make_job(index, pending, history, False))
                history = np.concatenate([history, pending.samples])[-keep:] if keep else history
                pending, index = nxt, index + 1
            if not stop.is_set():
                q_model.put(make_job(index, pending, history, True))
        except BaseException as exc:  # re-raised in the caller
            q_model.put(_Failure(exc))
        finally:
            q_model.put(_DONE)

    def model_stage():
        while True:
            job = q_model.get()
            if job is not _DONE and not isinstance(job, _Failure) and not stop.is_set():
                try:
                    job.mel = convert_mel(bundle, job.audio, profile)
                except BaseException as exc:
                    job = _Failure(exc)
            q_vocode.put(job)
            if job is _DONE:
                return

    def vocode_stage():
        while True:
            job = q_vocode.get()
            if job is _DONE:
                return
            if isinstance(job, _Failure):
                failure.append(job.exc)
                stop.set()
            if stop.is_set():
                continue
            try:
                y = bundle.vocoder(job.mel).samples[job.context_samples:]
                if not job.is_last:
                    y = y[:job.n_input] if len(y) >= job.n_input else np.pad(y, (0, job.n_input - len(y)))
                job.out = AudioBuffer(y, bundle.dsp.sample_rate)
                results.append((job, time.perf_counter() - job.started))
            except BaseException as exc:
                failure.append(exc)
                stop.set()

    threads = [threading.Thread(target=f, daemon=True) for f in (ingest, model_stage, vocode_stage)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t0
    if failure:
        raise failure[0]
    results.sort(key=lambda r: r[0].index)
    audio_seconds = sum(job.n_input for job, _ in results) / bundle.dsp.sample_rate
    report = LatencyReport(tuple(lat * 1e3 for _, lat in results), audio_seconds, wall)
    return StreamResult([job.out for job, _ in results], report, profile)
