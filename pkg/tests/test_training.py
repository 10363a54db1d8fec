import json

import numpy as np
import pytest

from accentconv.autodiff import cosine_lr
from accentconv.models import build_bundle
from accentconv.synth import SynthSpec, generate_synthetic_corpus
from accentconv.training import (
    CorpusMismatchError,
    MissingPrerequisiteError,
    default_config,
    load_corpus,
    train,
)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_corpus")
    generate_synthetic_corpus(SynthSpec(), out, seed=0)
    return out / "manifest.jsonl"


def fresh(manifest, ablation=False):
    b = build_bundle("toy", seed=0, ablation=ablation)
    return b, load_corpus(manifest, b)


def test_corpus_labels(manifest):
    _, c = fresh(manifest)
    assert len(c) == 8 and c.accents == ["accent0", "accent1"] and c.speakers == ["spk0", "spk1"]
    item = c.items[0]
    assert item.mel.shape[0] == 80 and item.pitch.shape == (1, 4 * -(-item.mel.shape[1] // 4), 2)
    assert all(0 <= t < 128 for it in c.items for t in it.tokens)


def test_prerequisites_enforced(manifest):
    b, c = fresh(manifest)
    with pytest.raises(MissingPrerequisiteError):
        train(b, c, "stp", default_config("stp", steps=1))
    with pytest.raises(MissingPrerequisiteError):
        train(b, c, "sts", default_config("sts", steps=1))
    with pytest.raises(CorpusMismatchError):
        train(b, c, "ablation", default_config("ablation", steps=1))
    ab, c2 = fresh(manifest, ablation=True)
    with pytest.raises(CorpusMismatchError):
        train(ab, c2, "aege", default_config("aege", steps=1))


def test_too_many_accents_for_preset(manifest):
    b = build_bundle("toy", seed=0, n_accents=1)
    with pytest.raises(CorpusMismatchError):
        load_corpus(manifest, b)


def test_log_records_and_cosine_schedule(manifest, tmp_path):
    b, c = fresh(manifest)
    path = tmp_path / "log.jsonl"
    log = train(b, c, "aege", default_config("aege", steps=4), log_path=path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["step"] for r in lines] == [1, 2, 3, 4]
    assert all(set(r) == {"step", "stage", "loss", "lr"} and r["stage"] == "aege" for r in lines)
    assert [r["lr"] for r in lines] == pytest.approx([cosine_lr(t, 1e-3, 0.0, 4) for t in range(4)])
    assert "aege" in b.trained_stages and np.isfinite(log.final_loss)


def run_pipeline(manifest, steps=3):
    b, c = fresh(manifest)
    logs = {s: train(b, c, s, default_config(s, steps=steps)) for s in ("aege", "se", "stp", "sts")}
    return b, logs


def test_fixed_seed_gives_identical_trajectories(manifest):
    _, first = run_pipeline(manifest)
    b, second = run_pipeline(manifest)
    for stage in first:
        assert first[stage].losses == second[stage].losses
    assert b.trained_stages == {"aege", "se", "stp", "sts"}


def test_sts_stage_leaves_upstream_untouched(manifest):
    b, c = fresh(manifest)
    for s in ("aege", "se", "stp"):
        train(b, c, s, default_config(s, steps=2))
    before = {k: v.copy() for k, v in b.state_dict().items() if not k.startswith("sts.")}
    log = train(b, c, "sts", default_config("sts", steps=2))
    assert log.frozen_grad_norms == {"aege": 0.0, "se": 0.0, "stp": 0.0}
    after = b.state_dict()
    assert all(np.array_equal(v, after[k]) for k, v in before.items())


def test_sts_loss_decreases(manifest):
    b, c = fresh(manifest)
    for s in ("aege", "se", "stp"):
        train(b, c, s, default_config(s, steps=1))
    log = train(b, c, "sts", default_config("sts", steps=15))
    assert log.final_loss < 0.9 * log.initial_loss


def test_ablation_stage_logs_both_terms(manifest):
    b, c = fresh(manifest, ablation=True)
    train(b, c, "se", default_config("se", steps=1))
    log = train(b, c, "ablation", default_config("ablation", steps=2))
    for r in log.records:
        assert r["loss"] == pytest.approx(r["ctc"] + r["mel"], rel=1e-6)
    assert {"stp", "sts", "ablation"} <= b.trained_stages
