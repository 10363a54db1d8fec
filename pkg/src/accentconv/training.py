"""Staged toy training: aege -> se -> stp -> sts, or the joint ablation stage.

Every step is a full pass over the (small) corpus with one utterance per
forward call, so no padding or attention masks are needed; per-utterance
losses are averaged before the backward pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .audio import AudioBuffer, extract_pitch, load_wav, mel_spectrogram
from .autodiff import AdamW, CosineAnnealing, SGD, Tensor
from .losses import accent_gender_loss, aam_loss, ctc_loss, mel_loss
from .manifest import GENDERS, ManifestRecord, parse_manifest, resolve_audio
from .models import AAMHead, ModelBundle, pad_pitch, pitch_features
from .text import Tokenizer, normalize_text

STAGES = ("aege", "se", "stp", "sts", "ablation")
PREREQUISITES = {
    "aege": (),
    "se": (),
    "stp": ("aege",),
    "sts": ("aege", "se", "stp"),
    "ablation": ("se",),
}


class MissingPrerequisiteError(RuntimeError):
    pass


class CorpusMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-3
    momentum: float = 0.9
    cosine: bool = False
    lr_min: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


# AE/GE follows the SGD recipe; STP, STS and the ablation model use AdamW, and
# all of them anneal with a cosine schedule. The SE recipe is unstated, so it
# gets plain AdamW. Step counts are the toy budgets that reach the convergence
# targets on the 8-utterance synthetic corpus.
DEFAULT_CONFIGS: Dict[str, TrainConfig] = {
    "aege": TrainConfig(steps=40, optimizer="sgd", lr=1e-3, weight_decay=2e-4, cosine=True),
    "se": TrainConfig(steps=30),
    "stp": TrainConfig(steps=400, cosine=True),
    "sts": TrainConfig(steps=600, cosine=True),
    "ablation": TrainConfig(steps=600, cosine=True),
}


def default_config(stage: str, **overrides) -> TrainConfig:
    if stage not in DEFAULT_CONFIGS:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return replace(DEFAULT_CONFIGS[stage], **overrides)


# ------------------------------------------------------------------- corpus


@dataclass
class TrainingItem:
    mel: np.ndarray  # [n_mels, T] float32
    tokens: List[int]
    accent: int
    gender: int
    speaker: int
    audio: AudioBuffer
    pitch: np.ndarray  # [1, 4 ceil(T / 4), 2]


@dataclass
class Corpus:
    items: List[TrainingItem]
    accents: List[str]
    speakers: List[str]

    def __len__(self) -> int:
        return len(self.items)


def load_corpus(manifest_path, bundle: ModelBundle, tokenizer: Optional[Tokenizer] = None,
                accent_classes: Optional[Sequence[str]] = None) -> Corpus:
    """Read audio, features and integer labels for every manifest record."""
    records = parse_manifest(manifest_path, accent_classes)
    if not records:
        raise CorpusMismatchError("the manifest is empty")
    return corpus_from_records(records, manifest_path, bundle, tokenizer, accent_classes)


def corpus_from_records(records: Sequence[ManifestRecord], manifest_path, bundle: ModelBundle,
                        tokenizer: Optional[Tokenizer] = None,
                        accent_classes: Optional[Sequence[str]] = None) -> Corpus:
    tok = tokenizer or Tokenizer.from_file()
    accents = list(accent_classes) if accent_classes is not None else sorted({r.accent for r in records})
    speakers = sorted({r.speaker for r in records})
    if len(accents) > bundle.preset.n_accents:
        raise CorpusMismatchError(f"{len(accents)} accent classes but the preset has {bundle.preset.n_accents}")
    items = []
    for r in records:
        audio = load_wav(resolve_audio(r, manifest_path))
        if audio.sample_rate != bundle.dsp.sample_rate:
            raise CorpusMismatchError(f"{r.audio_filepath}: {audio.sample_rate} Hz, expected {bundle.dsp.sample_rate}")
        mel = mel_spectrogram(audio, bundle.dsp).bands.astype(np.float32)
        n = 4 * math.ceil(mel.shape[1] / 4)
        pitch = pitch_features(pad_pitch(extract_pitch(audio, bundle.dsp), n), n)
        items.append(TrainingItem(mel, tok.encode(normalize_text(r.text)), accents.index(r.accent),
                                  GENDERS.index(r.gender), speakers.index(r.speaker), audio, pitch))
    return Corpus(items, accents, speakers)


# ---------------------------------------------------------------------- log


@dataclass
class TrainLog:
    stage: str
    records: List[dict] = field(default_factory=list)
    final_loss: float = math.nan
    initial_loss: float = math.nan
    frozen_grad_norms: Dict[str, float] = field(default_factory=dict)

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.records]

    def write_jsonl(self, path, mode: str = "a") -> None:
        with open(path, mode, encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _grad_norm(params) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                               for p in params if p.grad is not None)))


# -------------------------------------------------------------- loss closures


def _target_mel(item: TrainingItem, n: int):
    t = item.mel.shape[1]
    target = np.zeros((1, n, item.mel.shape[0]), dtype=np.float32)
    target[0, :t] = item.mel.T
    mask = np.zeros((1, n), dtype=np.float32)
    mask[0, :t] = 1.0
    return target, mask


def _sts_loss(bundle: ModelBundle, frames: Tensor, item: TrainingItem, acc, gen, spk) -> Tensor:
    pred = bundle.sts(frames, acc, gen, spk, item.pitch)
    target, mask = _target_mel(item, pred.shape[2])
    return mel_loss(ad.swapaxes(pred, 1, 2), target, mask)


def _mel_batch(item: TrainingItem) -> np.ndarray:
    return item.mel[None]


def _speaker_input(bundle: ModelBundle, item: TrainingItem) -> np.ndarray:
    return bundle.se.prepare(item.audio)[None].astype(np.float32)


# -------------------------------------------------------------------- train


def _check_stage(bundle: ModelBundle, corpus: Corpus, stage: str) -> None:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage == "ablation" and not bundle.ablation:
        raise CorpusMismatchError("the ablation stage needs an ablation bundle")
    if bundle.ablation and stage in ("aege", "stp", "sts"):
        raise CorpusMismatchError(f"an ablation bundle has no {stage!r} stage; use 'ablation'")
    missing = [p for p in PREREQUISITES[stage] if p not in bundle.trained_stages]
    if missing:
        raise MissingPrerequisiteError(f"stage {stage!r} needs {missing} trained first")
    if len(corpus.accents) > bundle.preset.n_accents:
        raise CorpusMismatchError("the corpus has more accent classes than the preset")
    if not corpus.items:
        raise CorpusMismatchError("the corpus is empty")


def _optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    else:
        opt = AdamW(params, cfg.lr, weight_decay=cfg.weight_decay)
    sched = CosineAnnealing(opt, max(cfg.steps, 1), cfg.lr_min) if cfg.cosine else None
    return opt, sched


class _Embeddings:
    """Per-item embeddings from frozen upstream models, computed once."""

    def __init__(self, bundle: ModelBundle, corpus: Corpus, need_accent: bool, need_speaker: bool):
        self.acc, self.gen, self.spk = [], [], []
        for item in corpus.items:
            if need_accent:
                a, g = bundle.aege.embed(_mel_batch(item))
                self.acc.append(a)
                self.gen.append(g)
            else:
                self.acc.append(None)
                self.gen.append(None)
            self.spk.append(bundle.se.embed(item.audio) if need_speaker else None)


def train(bundle: ModelBundle, corpus: Corpus, stage: str, config: Optional[TrainConfig] = None,
          log_path=None) -> TrainLog:
    """Run one training stage in place and return its log.

    Upstream models are frozen for the stage; the trained models are left
    in eval mode afterwards and the stage is recorded on the bundle.
    """
    _check_stage(bundle, corpus, stage)
    cfg = config or default_config(stage)
    items = corpus.items
    n = len(items)

    for name in PREREQUISITES[stage]:
        model = {"aege": bundle.aege, "se": bundle.se, "stp": bundle.stp}.get(name)
        if model is not None:
            model.freeze().eval()
    targets = {
        "aege": [bundle.aege],
        "se": [bundle.se],
        "stp": [bundle.stp],
        "sts": [bundle.sts],
        "ablation": [bundle.stp, bundle.sts],
    }[stage]
    for m in targets:
        m.unfreeze()
    params = [p for m in targets for p in m.parameters()]

    head = None
    if stage == "se":
        head = AAMHead(len(corpus.speakers), bundle.preset.speaker_dim, np.random.default_rng(cfg.seed))
        params += head.parameters()

    emb = _Embeddings(bundle, corpus, need_accent=stage in ("stp", "sts"), need_speaker=stage in ("sts", "ablation"))
    frames_cache: List[Tensor] = []
    if stage == "sts":
        with ad.no_grad():
            frames_cache = [Tensor(bundle.stp(_mel_batch(it), emb.acc[i]).frames.data) for i, it in enumerate(items)]

    def item_loss(i: int, item: TrainingItem) -> Dict[str, Tensor]:
        if stage == "aege":
            out = bundle.aege(_mel_batch(item))
            return {"loss": accent_gender_loss(out.accent_logits, [item.accent], out.gender_logits, [item.gender])}
        if stage == "se":
            e = bundle.se(Tensor(_speaker_input(bundle, item)))
            return {"loss": aam_loss(e, head.weight, [item.speaker])}
        if stage == "stp":
            ph = bundle.stp(_mel_batch(item), emb.acc[i])
            return {"loss": ctc_loss(ph.token_log_probs, [item.tokens])}
        if stage == "sts":
            return {"loss": _sts_loss(bundle, frames_cache[i], item, emb.acc[i], emb.gen[i], emb.spk[i])}
        ph = bundle.stp(_mel_batch(item), None)
        ctc = ctc_loss(ph.token_log_probs, [item.tokens])
        mel = _sts_loss(bundle, ph.frames, item, None, None, emb.spk[i])
        return {"loss": ctc + mel, "ctc": ctc, "mel": mel}

    def corpus_loss(backward: bool) -> Dict[str, float]:
        totals: Dict[str, float] = {}
        for i, item in enumerate(items):
            parts = item_loss(i, item)
            if backward:
                (parts["loss"] * (1.0 / n)).backward()
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + float(v.data) / n
        return totals

    def evaluate() -> Dict[str, float]:
        for m in targets:
            m.eval()
        with ad.no_grad():
            out = corpus_loss(False)
        for m in targets:
            m.train()
        return out

    log = TrainLog(stage)
    if stage == "sts":
        log.frozen_grad_norms = frozen_gradient_audit(bundle, corpus)

    initial = evaluate()
    log.initial_loss = initial["loss"]
    opt, sched = _optimizer(params, cfg)
    for m in targets:
        m.train()
    for step in range(1, cfg.steps + 1):
        lr = opt.lr
        opt.zero_grad()
        parts = corpus_loss(True)
        opt.step()
        if sched is not None:
            sched.step()
        record = {"step": step, "stage": stage, "loss": parts["loss"], "lr": lr}
        if stage == "ablation":
            record.update(ctc=parts["ctc"], mel=parts["mel"])
        log.records.append(record)
    final = evaluate()
    log.final_loss = final["loss"]

    for m in targets:
        m.eval()
        for p in m.parameters():
            p.grad = None
    bundle.trained_stages.add(stage)
    if stage == "ablation":
        bundle.trained_stages.update(("stp", "sts"))
    if log_path is not None:
        log.write_jsonl(log_path)
    return log


def frozen_gradient_audit(bundle: ModelBundle, corpus: Corpus) -> Dict[str, float]:
    """Backpropagate the STS loss through live (uncached) upstream forwards and
    report the gradient norm landing on each frozen model."""
    frozen = {k: m for k, m in bundle.models().items() if k != "sts"}
    for m in frozen.values():
        for p in m.parameters():
            p.grad = None
    for item in corpus.items[:2]:
        out = bundle.aege(_mel_batch(item))
        spk = bundle.se(Tensor(_speaker_input(bundle, item)))
        ph = bundle.stp(_mel_batch(item), out.accent_emb)
        _sts_loss(bundle, ph.frames, item, out.accent_emb, out.gender_emb, spk).backward()
    norms = {k: _grad_norm(m.parameters()) for k, m in frozen.items()}
    for p in bundle.sts.parameters():
        p.grad = None
    return norms


def train_all(bundle: ModelBundle, corpus: Corpus, configs: Optional[Dict[str, TrainConfig]] = None,
              log_path=None) -> Dict[str, TrainLog]:
    """Every stage in dependency order (``se`` then ``ablation`` for ablation bundles)."""
    order = ("se", "ablation") if bundle.ablation else ("aege", "se", "stp", "sts")
    configs = configs or {}
    return {s: train(bundle, corpus, s, configs.get(s), log_path) for s in order}
