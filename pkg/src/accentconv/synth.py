"""Deterministic formant-synthesised corpora for desk-scale training.

Every letter has a fixed formant pattern, so transcripts are recoverable
from the audio. A "speaker" scales the formants and sets the pitch; an
"accent" shifts the second formant and stretches segment durations.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.signal import lfilter

from .audio import AudioBuffer, save_wav
from .manifest import ManifestRecord, write_manifest

SAMPLE_RATE = 22050
SEGMENT_SECONDS = 0.07
EDGE_SILENCE = 0.1
VOWELS = set("aeiouy")
VOICED = set("bdglmnrvwzj")

DETERMINERS = ["the", "a", "my", "one"]
NOUNS = ["cat", "dog", "fox", "bird", "fish", "cow"]
VERBS = ["runs", "sits", "sees", "hops", "naps", "eats"]


def _letter_table():
    # a fixed draw, independent of any corpus seed
    r = np.random.default_rng(20240601)
    table = {}
    for ch in string.ascii_lowercase:
        f1 = r.uniform(280, 850)
        f2 = r.uniform(900, 2400)
        f3 = r.uniform(2500, 3400)
        if ch in VOWELS:
            kind, gain = "voiced", 1.0
        elif ch in VOICED:
            kind, gain = "voiced", 0.5
        else:
            kind, gain = "noise", 0.35
        table[ch] = (np.array([f1, f2, f3]), kind, gain)
    return table


LETTERS = _letter_table()


@dataclass(frozen=True)
class SynthSpec:
    n_speakers: int = 2
    n_accents: int = 2
    n_utterances: int = 2
    sample_rate: int = SAMPLE_RATE

    @property
    def total(self) -> int:
        return self.n_speakers * self.n_accents * self.n_utterances


@dataclass(frozen=True)
class Voice:
    formant_scale: float
    f0: float
    gender: str


@dataclass(frozen=True)
class Accent:
    f2_shift: float
    duration_scale: float


def make_voice(index: int) -> Voice:
    gender = "female" if index % 2 == 0 else "male"
    base = 200.0 if gender == "female" else 115.0
    return Voice(formant_scale=1.12 - 0.07 * (index % 5), f0=base + 9.0 * (index // 2), gender=gender)


def make_accent(index: int) -> Accent:
    return Accent(f2_shift=-180.0 + 260.0 * (index % 3), duration_scale=1.0 + 0.15 * (index % 3))


def _resonate(x: np.ndarray, freqs, sr: int, bandwidth: float = 90.0) -> np.ndarray:
    y = x
    for f in freqs:
        f = min(f, 0.45 * sr)
        r = np.exp(-np.pi * bandwidth / sr)
        a = [1.0, -2 * r * np.cos(2 * np.pi * f / sr), r * r]
        y = lfilter([1.0 - r], a, y)
    return y


def synthesize(text: str, voice: Voice, accent: Accent, rng: np.random.Generator,
               sr: int = SAMPLE_RATE) -> AudioBuffer:
    """Render ``text`` (lowercase letters and spaces) letter by letter."""
    pieces = [np.zeros(int(EDGE_SILENCE * sr))]
    phase = 0.0
    for ch in text:
        n = int(SEGMENT_SECONDS * accent.duration_scale * rng.uniform(0.9, 1.1) * sr)
        if ch == " ":
            pieces.append(np.zeros(n))
            continue
        if ch not in LETTERS:
            raise ValueError(f"cannot synthesise {ch!r}")
        formants, kind, gain = LETTERS[ch]
        freqs = formants * voice.formant_scale + np.array([0.0, accent.f2_shift, 0.0])
        if kind == "voiced":
            f0 = voice.f0 * np.linspace(1.02, 0.98, n)
            ph = phase + 2 * np.pi * np.cumsum(f0) / sr
            phase = ph[-1]
            source = (np.mod(ph, 2 * np.pi) / np.pi - 1.0) + 0.02 * rng.standard_normal(n)
        else:
            source = rng.standard_normal(n)
        seg = _resonate(source, freqs, sr)
        ramp = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / (0.005 * sr))
        seg = seg * ramp
        pieces.append(gain * seg / (np.max(np.abs(seg)) + 1e-12))
    pieces.append(np.zeros(int(EDGE_SILENCE * sr)))
    x = np.concatenate(pieces)
    x = 0.5 * x / (np.max(np.abs(x)) + 1e-12)
    return AudioBuffer(x, sr)


def sample_transcript(rng: np.random.Generator) -> str:
    return f"{rng.choice(DETERMINERS)} {rng.choice(NOUNS)} {rng.choice(VERBS)}"


def generate_synthetic_corpus(spec: SynthSpec, out_dir, seed: int = 0) -> List[ManifestRecord]:
    """Write ``spec.total`` WAV files plus ``manifest.jsonl`` into ``out_dir``.

    Every speaker reads the same prompt list in every accent, so files that
    share a speaker and prompt index differ only by accent and rendering
    noise. The output depends only on ``(spec, seed)``; audio paths in the
    manifest are relative to ``out_dir``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out}: {exc}") from None
    rng = np.random.default_rng(seed)
    prompts = [sample_transcript(rng) for _ in range(spec.n_utterances)]
    records = []
    for s in range(spec.n_speakers):
        voice = make_voice(s)
        for a in range(spec.n_accents):
            accent = make_accent(a)
            for u in range(spec.n_utterances):
                text = prompts[u]
                audio = synthesize(text, voice, accent, rng, spec.sample_rate)
                name = f"spk{s}_acc{a}_{u:03d}.wav"
                save_wav(out / name, audio)
                records.append(ManifestRecord(name, text, f"accent{a}", voice.gender, f"spk{s}",
                                              round(audio.duration, 6)))
    write_manifest(records, out / "manifest.jsonl")
    return records


def accent_names(n: int) -> List[str]:
    return [f"accent{i}" for i in range(n)]
