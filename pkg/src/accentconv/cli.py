"""Command-line entry point: ``accentconv <subcommand> ...``.

Every subcommand prints a short human-readable table by default and one
JSON record per line with ``--json``. Failures print ``error: ...`` to
stderr and exit 1; argument errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from . import __version__
from .audio import AudioBuffer, extract_pitch, load_wav, mel_spectrogram, save_wav
from .checkpoint import load_bundle, load_checkpoint, save_bundle
from .config import RunConfig, load_config
from .manifest import parse_manifest, resolve_audio
from .metrics import corpus_wer_cer, wer_cer
from .models import PUBLISHED_MILLIONS, ModelBundle, build_bundle, count_parameters
from .pipeline import (
    PUBLISHED_LATENCY_MS,
    PUBLISHED_RTFX,
    PitchPolicy,
    StreamConfig,
    benchmark,
    convert,
    profile_from_audio,
    split_chunks,
    stream_convert,
)
from .synth import SynthSpec, generate_synthetic_corpus
from .text import Tokenizer, greedy_ctc_decode, normalize_text
from .training import STAGES, corpus_from_records, train
from .vocoder import ExternalVocoder


class _Out:
    def __init__(self, as_json: bool, stream=None):
        self.as_json = as_json
        self.stream = stream or sys.stdout

    def record(self, rec: dict) -> None:
        """Emit one record: a JSON line, or ``key: value`` rows."""
        if self.as_json:
            print(json.dumps(rec, sort_keys=True, default=_jsonable), file=self.stream)
        else:
            width = max(len(k) for k in rec)
            for k, v in rec.items():
                print(f"{k:<{width}}  {_fmt(v)}", file=self.stream)

    def table(self, rows: Sequence[dict]) -> None:
        if self.as_json:
            for r in rows:
                self.record(r)
            return
        if not rows:
            return
        cols = list(rows[0])
        cells = [[_fmt(r[c]) for c in cols] for r in rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        print("  ".join(c.ljust(w) for c, w in zip(cols, widths)), file=self.stream)
        for row in cells:
            print("  ".join(v.ljust(w) for v, w in zip(row, widths)), file=self.stream)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ----------------------------------------------------------------- helpers


def _run_config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _bundle(args, ablation: bool = False) -> ModelBundle:
    """Checkpoint if given, otherwise freshly initialised weights from ``--seed``."""
    if getattr(args, "ckpt", None):
        bundle = load_bundle(args.ckpt)
    else:
        cfg = _run_config(args)
        bundle = build_bundle(cfg.preset, seed=args.seed, ablation=ablation, dsp=cfg.dsp)
    if getattr(args, "vocoder", None):
        bundle.vocoder = ExternalVocoder.from_spec(args.vocoder, args.vocoder_ckpt, bundle.dsp)
    return bundle


def _pitch_policy(text: Optional[str]) -> PitchPolicy:
    if not text or text == "passthrough":
        return PitchPolicy()
    kind, _, value = text.partition(":")
    try:
        return PitchPolicy(kind, float(value))
    except ValueError:
        raise ValueError(f"pitch policy must be passthrough, flat:<hz> or scale:<k>, got {text!r}") from None


# -------------------------------------------------------------- subcommands


def cmd_preprocess(args, out: _Out) -> int:
    cfg = _run_config(args)
    audio = load_wav(args.input)
    mel = mel_spectrogram(audio, cfg.dsp)
    pitch = extract_pitch(audio, cfg.dsp)
    np.savez(args.output, mel=mel.bands.astype(np.float32), f0=pitch.f0, voiced=pitch.voiced)
    out.record({"input": str(args.input), "output": str(args.output), "frames": mel.n_frames,
                "n_mels": cfg.dsp.n_mels, "seconds": audio.duration})
    return 0


def cmd_pitch(args, out: _Out) -> int:
    cfg = _run_config(args)
    pitch = extract_pitch(load_wav(args.input), cfg.dsp)
    hop_s = cfg.dsp.hop_size / cfg.dsp.sample_rate
    if out.as_json:
        for i, (f, v) in enumerate(zip(pitch.f0, pitch.voiced)):
            out.record({"frame": i, "time": round(i * hop_s, 6), "f0": float(f), "voiced": bool(v)})
    else:
        voiced = pitch.f0[pitch.voiced]
        out.record({"frames": len(pitch.f0), "voiced_frames": int(pitch.voiced.sum()),
                    "median_f0_hz": float(np.median(voiced)) if voiced.size else 0.0})
    return 0


def cmd_embed(args, out: _Out) -> int:
    bundle = _bundle(args)
    profile = profile_from_audio(bundle, load_wav(args.input))
    embs = {"speaker": profile.speaker_emb}
    if profile.accent_emb is not None:
        embs.update(accent=profile.accent_emb, gender=profile.gender_emb)
    if args.output:
        np.savez(args.output, **{k: e.values for k, e in embs.items()})
    rows = [{"kind": k, "dim": e.values.size, "norm": float(np.linalg.norm(e.values))} for k, e in embs.items()]
    if out.as_json:
        for k, e in embs.items():
            out.record({"kind": k, "values": e.values})
    else:
        out.table(rows)
    return 0


def _profile(args, bundle: ModelBundle, source: AudioBuffer):
    ref = load_wav(args.profile) if args.profile else source
    return profile_from_audio(bundle, ref).with_overrides(pitch_policy=_pitch_policy(args.pitch))


def cmd_convert(args, out: _Out) -> int:
    bundle = _bundle(args)
    audio = load_wav(args.input)
    result = convert(bundle, audio, _profile(args, bundle, audio))
    save_wav(args.output, result)
    out.record({"input": str(args.input), "output": str(args.output), "input_seconds": audio.duration,
                "output_seconds": result.duration})
    return 0


def cmd_stream(args, out: _Out) -> int:
    bundle = _bundle(args)
    audio = load_wav(args.input)
    enroll = load_wav(args.enroll) if args.enroll else None
    cfg = StreamConfig(args.chunk, args.context, "enrollment" if enroll is not None else "first_chunk", enroll)
    res = stream_convert(bundle, split_chunks(audio, cfg.chunk_seconds), cfg)
    save_wav(args.output, res.joined())
    out.table([{"chunk": i, "samples": len(c), "latency_ms": lat}
               for i, (c, lat) in enumerate(zip(res.chunks, res.report.latencies_ms))])
    if not out.as_json:
        print()
    out.record({"chunks": len(res.chunks), **res.report.summary()})
    return 0


def cmd_benchmark(args, out: _Out) -> int:
    bundle = _bundle(args)
    audio = load_wav(args.input)
    rep = benchmark(bundle, audio, args.iters, args.warmup)
    summary = rep.summary()
    fixed = summary.pop("precomputed_profile")
    summary["warmup"] = args.warmup
    if out.as_json:
        out.record({"profile": "per_run", **summary})
        out.record({"profile": "precomputed", **fixed})
        out.record({"reference": "published", "mean_ms": PUBLISHED_LATENCY_MS, "rtfx": PUBLISHED_RTFX})
    else:
        rows = []
        for name, s in (("per-run profile", summary), ("precomputed profile", fixed)):
            rows.append({"timing": name, "iters": s["iterations"], "mean_ms": s["mean_ms"], "p50_ms": s["p50_ms"],
                         "p95_ms": s["p95_ms"], "rtfx": s["rtfx"]})
        out.table(rows)
        print(f"\naudio {audio.duration:.2f} s, warmup {args.warmup}; published GPU figures for comparison: "
              f"{PUBLISHED_LATENCY_MS:.0f} ms, {PUBLISHED_RTFX:.0f} RTFX")
    return 0


def cmd_train(args, out: _Out) -> int:
    cfg = _run_config(args)
    if args.ckpt:
        bundle = load_bundle(args.ckpt)
    else:
        bundle = build_bundle(cfg.preset, seed=args.seed, ablation=args.ablation, dsp=cfg.dsp)
    records = parse_manifest(args.manifest)
    corpus = corpus_from_records(records, args.manifest, bundle)
    if args.stage == "all":
        stages = ("se", "ablation") if bundle.ablation else ("aege", "se", "stp", "sts")
    else:
        stages = (args.stage,)
    if args.log:
        Path(args.log).write_text("")
    rows = []
    for stage in stages:
        tc = cfg.train_config(stage)
        over = {"seed": args.seed}
        if args.steps is not None:
            over["steps"] = args.steps
        log = train(bundle, corpus, stage, replace(tc, **over), args.log)
        row = {"stage": stage, "steps": len(log.records), "initial_loss": log.initial_loss,
               "final_loss": log.final_loss}
        if log.frozen_grad_norms:
            row["frozen_grad_norm"] = max(log.frozen_grad_norms.values())
        rows.append(row)
        save_bundle(bundle, args.output)
    out.table(rows)
    return 0


def _read_lines(path) -> List[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_eval_asr(args, out: _Out) -> int:
    refs = [normalize_text(line) for line in _read_lines(args.ref)]
    if args.hyp:
        hyps = [normalize_text(line) for line in _read_lines(args.hyp)]
    else:
        hyps = _transcribe(args, len(refs))
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} reference lines but {len(hyps)} hypotheses")
    pairs = [(r, h) for r, h in zip(refs, hyps) if r]
    if out.as_json:
        for i, (r, h) in enumerate(pairs):
            rep = wer_cer(r, h)
            out.record({"line": i + 1, "wer": rep.wer, "cer": rep.cer, "substitutions": rep.substitutions,
                        "insertions": rep.insertions, "deletions": rep.deletions})
    wer, cer = corpus_wer_cer(pairs)
    out.record({"utterances": len(pairs), "wer": wer, "cer": cer})
    return 0


def _transcribe(args, n: int) -> List[str]:
    if not (args.manifest and args.ckpt):
        raise ValueError("give --hyp, or --manifest and --ckpt to transcribe with the speech-to-phonetics model")
    bundle = _bundle(args)
    tok = Tokenizer.from_file()
    hyps = []
    for rec in parse_manifest(args.manifest)[:n]:
        mel = mel_spectrogram(load_wav(resolve_audio(rec, args.manifest)), bundle.dsp)
        acc = bundle.aege.embed(mel)[0] if bundle.aege is not None else None
        hyps.append(greedy_ctc_decode(bundle.stp(mel, acc).token_log_probs.data[0], tok))
    return hyps


def cmd_synth_data(args, out: _Out) -> int:
    spec = SynthSpec(args.speakers, args.accents, args.utterances)
    records = generate_synthetic_corpus(spec, args.output, args.seed)
    out.record({"output": str(args.output), "utterances": len(records),
                "manifest": str(Path(args.output) / "manifest.jsonl"),
                "seconds": round(sum(r.duration for r in records), 3)})
    return 0


def cmd_inspect_ckpt(args, out: _Out) -> int:
    ckpt = load_checkpoint(args.ckpt)
    meta = ckpt.metadata
    out.record({"path": str(args.ckpt), "entries": len(ckpt.tensors),
                "parameters": int(sum(v.size for v in ckpt.tensors.values())),
                **{k: v for k, v in meta.items() if k != "dsp"}})
    if "preset" in meta:
        bundle = load_bundle(args.ckpt)
        counts = count_parameters(bundle, trainable_only=False)
        if not out.as_json:
            print()
        out.table([{"model": k, "parameters": v, "millions": round(v / 1e6, 2),
                    "published_millions": PUBLISHED_MILLIONS.get(k)} for k, v in counts.items()])
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="one JSON record per line")
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--config", help="key/value config file (preset, dsp, train settings)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--ckpt", help="model checkpoint; random weights from --seed if omitted")
    model.add_argument("--vocoder", help="external vocoder as module:factory")
    model.add_argument("--vocoder-ckpt", help="checkpoint passed to the vocoder factory")

    p = argparse.ArgumentParser(prog="accentconv", description="Streaming accent conversion toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_text, parents=(common,)):
        sp = sub.add_parser(name, parents=list(parents), help=help_text, description=help_text)
        sp.set_defaults(func=fn)
        return sp

    sp = add("preprocess", cmd_preprocess, "log-mel and pitch features to an .npz file")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output", required=True)

    sp = add("pitch", cmd_pitch, "F0 contour of a WAV file")
    sp.add_argument("--in", dest="input", required=True)

    sp = add("embed", cmd_embed, "accent, gender and speaker embeddings", (common, model))
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output")

    for name, fn, text in (("convert", cmd_convert, "convert a WAV file"),
                           ("stream", cmd_stream, "convert a WAV file chunk by chunk")):
        sp = add(name, fn, text, (common, model))
        sp.add_argument("--in", dest="input", required=True)
        sp.add_argument("--out", dest="output", required=True)
        sp.add_argument("--profile", help="copy accent, gender and voice from this WAV")
        sp.add_argument("--pitch", help="passthrough (default), flat:<hz> or scale:<k>")
    sp.add_argument("--chunk", type=float, default=0.2, help="chunk length in seconds (<= 0.2)")
    sp.add_argument("--context", type=int, default=8, help="left-context frames per chunk")
    sp.add_argument("--enroll", help="take the profile from this WAV instead of the first chunk")

    sp = add("benchmark", cmd_benchmark, "latency and throughput of repeated conversion", (common, model))
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--warmup", type=int, default=1)

    sp = add("train", cmd_train, "staged training on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", dest="output", required=True, help="checkpoint written after each stage")
    sp.add_argument("--stage", choices=("all",) + STAGES, default="all")
    sp.add_argument("--ckpt", help="start from this checkpoint")
    sp.add_argument("--ablation", action="store_true", help="train the reduced model without accent/gender paths")
    sp.add_argument("--steps", type=int, help="override the step count of every stage")
    sp.add_argument("--log", help="write the per-step JSONL log here")

    sp = add("eval-asr", cmd_eval_asr, "WER and CER of line-aligned transcripts", (common, model))
    sp.add_argument("--ref", required=True)
    sp.add_argument("--hyp")
    sp.add_argument("--manifest", help="transcribe these utterances instead of reading --hyp")

    sp = add("synth-data", cmd_synth_data, "write a formant-synthesised toy corpus")
    sp.add_argument("--out", dest="output", required=True)
    sp.add_argument("--speakers", type=int, default=2)
    sp.add_argument("--accents", type=int, default=2)
    sp.add_argument("--utterances", type=int, default=2)

    sp = add("inspect-ckpt", cmd_inspect_ckpt, "checkpoint metadata and parameter counts")
    sp.add_argument("--ckpt", required=True)
    return p


def main(argv: Optional[Iterable[str]] = None) -> int:
    args = build_parser().parse_args(None if argv is None else list(argv))
    out = _Out(args.json)
    try:
        return args.func(args, out)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
