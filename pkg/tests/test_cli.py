import json
import subprocess
import sys

import numpy as np
import pytest

from accentconv.audio import AudioBuffer, load_wav, save_wav
from accentconv.checkpoint import save_bundle
from accentconv.cli import main
from accentconv.models import build_bundle
from accentconv.synth import SynthSpec, generate_synthetic_corpus


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    generate_synthetic_corpus(SynthSpec(), d / "corpus", seed=0)
    save_bundle(build_bundle("toy", seed=0), d / "m.ckpt")
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def test_convert_writes_wav(work, capsys):
    src = work / "corpus" / "spk0_acc0_000.wav"
    code, out, _ = run(capsys, "convert", "--in", src, "--out", work / "b.wav", "--ckpt", work / "m.ckpt", "--json")
    assert code == 0
    rec = json_lines(out)[0]
    y = load_wav(work / "b.wav")
    assert y.sample_rate == 22050 and rec["output_seconds"] == pytest.approx(y.duration)


def test_convert_with_profile_and_pitch(work, capsys):
    src = work / "corpus" / "spk1_acc1_000.wav"
    ref = work / "corpus" / "spk0_acc0_001.wav"
    code, _, _ = run(capsys, "convert", "--in", src, "--out", work / "c.wav", "--ckpt", work / "m.ckpt",
                     "--profile", ref, "--pitch", "flat:180")
    assert code == 0
    code, _, err = run(capsys, "convert", "--in", src, "--out", work / "c.wav", "--pitch", "wobble:2")
    assert code == 1 and err.startswith("error:")


def test_benchmark_protocol_shape(work, capsys):
    five = work / "five.wav"
    x = load_wav(work / "corpus" / "spk0_acc0_000.wav").samples
    save_wav(five, AudioBuffer(np.resize(x, 5 * 22050), 22050))
    code, out, _ = run(capsys, "benchmark", "--in", five, "--iters", 2, "--ckpt", work / "m.ckpt", "--json")
    assert code == 0
    per_run, fixed, ref = json_lines(out)
    for rec in (per_run, fixed):
        assert rec["iterations"] == 2 and {"mean_ms", "p50_ms", "p95_ms", "rtfx"} <= set(rec)
        assert rec["audio_seconds"] == pytest.approx(10.0)
    assert per_run["warmup"] == 1 and ref["mean_ms"] == 52.0 and ref["rtfx"] == 96.0


def test_eval_asr(work, capsys):
    (work / "r.txt").write_text("Hello, world!\n")
    (work / "h.txt").write_text("hello word\n")
    code, out, _ = run(capsys, "eval-asr", "--ref", work / "r.txt", "--hyp", work / "h.txt", "--json")
    assert code == 0 and json_lines(out)[-1]["wer"] == 0.5


def test_eval_asr_transcribes_from_manifest(work, capsys):
    manifest = work / "corpus" / "manifest.jsonl"
    refs = [json.loads(line)["text"] for line in manifest.read_text().splitlines()]
    (work / "refs.txt").write_text("\n".join(refs) + "\n")
    code, out, _ = run(capsys, "eval-asr", "--ref", work / "refs.txt", "--manifest", manifest,
                       "--ckpt", work / "m.ckpt", "--json")
    assert code == 0 and json_lines(out)[-1]["utterances"] == 8


def test_stream_pitch_embed_preprocess(work, capsys):
    src = work / "corpus" / "spk0_acc1_001.wav"
    code, out, _ = run(capsys, "stream", "--in", src, "--out", work / "s.wav", "--ckpt", work / "m.ckpt", "--json")
    recs = json_lines(out)
    n_chunks = -(-len(load_wav(src)) // 4410)
    assert code == 0 and recs[-1]["chunks"] == len(recs) - 1 == n_chunks
    code, out, _ = run(capsys, "pitch", "--in", src, "--json")
    assert code == 0 and {"frame", "time", "f0", "voiced"} == set(json_lines(out)[0])
    code, out, _ = run(capsys, "embed", "--in", src, "--ckpt", work / "m.ckpt", "--out", work / "e.npz")
    assert code == 0 and "speaker" in out
    assert np.load(work / "e.npz")["speaker"].shape == (512,)
    code, _, _ = run(capsys, "preprocess", "--in", src, "--out", work / "f.npz")
    assert code == 0 and np.load(work / "f.npz")["mel"].shape[0] == 80


def test_synth_data_and_train_and_inspect(tmp_path, capsys):
    code, _, _ = run(capsys, "synth-data", "--out", tmp_path / "c", "--seed", 3)
    assert code == 0 and len(list((tmp_path / "c").glob("*.wav"))) == 8
    code, out, _ = run(capsys, "train", "--manifest", tmp_path / "c" / "manifest.jsonl", "--out", tmp_path / "t.ckpt",
                       "--steps", 1, "--log", tmp_path / "log.jsonl", "--json")
    assert code == 0 and [r["stage"] for r in json_lines(out)] == ["aege", "se", "stp", "sts"]
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 4
    code, out, _ = run(capsys, "inspect-ckpt", "--ckpt", tmp_path / "t.ckpt", "--json")
    recs = json_lines(out)
    assert code == 0 and recs[0]["trained_stages"] == ["aege", "se", "stp", "sts"]
    assert {r["model"] for r in recs[1:]} >= {"AE/GE", "SE", "STP", "STS", "Full STS"}


def test_usage_errors_exit_2(capsys):
    for argv in (["frobnicate"], ["convert", "--bogus"], []):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_errors_exit_1(tmp_path, capsys):
    code, _, err = run(capsys, "inspect-ckpt", "--ckpt", tmp_path / "missing.ckpt")
    assert code == 1 and "error" in err
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX")
    code, _, err = run(capsys, "inspect-ckpt", "--ckpt", tmp_path / "bad.ckpt")
    assert code == 1 and "ACVC" in err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "accentconv", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "accentconv" in res.stdout
