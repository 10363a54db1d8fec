"""Training objectives: dual cross-entropy, CTC, additive angular margin and masked mel MSE.

All losses take :class:`~accentconv.autodiff.Tensor` inputs and return scalar
tensors. CTC also has a plain numpy evaluator and a brute-force oracle.
"""

from __future__ import annotations

import itertools
import math
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .autodiff.tensor import make_result

AAM_SCALE = 30.0
AAM_MARGIN = 0.2
BRUTE_FORCE_LIMIT = 10**6


class CtcInfeasibleError(ValueError):
    """The target cannot be aligned to the given number of steps."""


# ------------------------------------------------------------ cross-entropy


def _class_ids(y, n_classes: int, batch: int, what: str) -> np.ndarray:
    ids = np.atleast_1d(np.asarray(y))
    if ids.dtype.kind not in "iu":
        raise TypeError(f"{what} ids must be integers")
    if ids.shape != (batch,):
        raise ValueError(f"{what}: expected {batch} ids, got shape {ids.shape}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= n_classes:
        raise ValueError(f"{what} id out of range [0, {n_classes})")
    return ids


def cross_entropy(logits: Tensor, y, what: str = "class") -> Tensor:
    """Mean softmax cross-entropy of ``[B, K]`` (or ``[K]``) logits."""
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
    b, k = logits.shape
    ids = _class_ids(y, k, b, what)
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.getitem(logp, (np.arange(b), ids))
    return -ad.mean(picked)


def accent_gender_loss(x_a: Tensor, y_a, x_g: Tensor, y_g) -> Tensor:
    """Accent cross-entropy plus gender cross-entropy (each averaged over the batch)."""
    return cross_entropy(x_a, y_a, "accent") + cross_entropy(x_g, y_g, "gender")


# ---------------------------------------------------------------------- CTC


def _check_ctc(log_probs: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    if log_probs.ndim != 2:
        raise ValueError(f"log_probs must be [T, V+1], got {log_probs.shape}")
    blank = log_probs.shape[1] - 1
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.size and (tgt.min() < 0 or tgt.max() >= blank):
        raise ValueError(f"target ids must lie in [0, {blank}); the blank id {blank} is reserved")
    return tgt


def ctc_min_steps(targets: Sequence[int]) -> int:
    """Shortest input that can emit ``targets``: one step per token plus a blank between repeats."""
    tgt = list(targets)
    return len(tgt) + sum(a == b for a, b in zip(tgt, tgt[1:]))


def _extended(tgt: np.ndarray, blank: int):
    ext = np.full(2 * len(tgt) + 1, blank, dtype=np.int64)
    ext[1::2] = tgt
    # a skip from s-2 to s is allowed for labels that differ from the label two back
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ext, skip


def _ctc_lattice(lp: np.ndarray, tgt: np.ndarray):
    t_steps, n_sym = lp.shape
    ext, skip = _extended(tgt, n_sym - 1)
    s_len = len(ext)
    emit = lp[:, ext]
    alpha = np.full((t_steps, s_len), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_steps):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    beta = np.full((t_steps, s_len), -np.inf)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(t_steps - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]
    tail = alpha[-1, -2:] if s_len > 1 else alpha[-1, -1:]
    log_p = np.logaddexp.reduce(tail)
    return ext, emit, alpha, beta, log_p


def ctc_nll(log_probs, targets: Sequence[int]) -> float:
    """``-log p(targets | log_probs)``; ``inf`` when no alignment exists."""
    lp = np.asarray(log_probs, dtype=np.float64)
    tgt = _check_ctc(lp, targets)
    if ctc_min_steps(tgt) > lp.shape[0]:
        return math.inf
    with np.errstate(invalid="ignore"):
        log_p = _ctc_lattice(lp, tgt)[-1]
    return -float(log_p) if np.isfinite(log_p) else math.inf


def ctc_grad(log_probs, targets: Sequence[int]):
    """Loss and its gradient w.r.t. every entry of ``log_probs``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    tgt = _check_ctc(lp, targets)
    if ctc_min_steps(tgt) > lp.shape[0]:
        raise CtcInfeasibleError(f"{len(tgt)} targets need {ctc_min_steps(tgt)} steps, got {lp.shape[0]}")
    with np.errstate(invalid="ignore"):
        ext, emit, alpha, beta, log_p = _ctc_lattice(lp, tgt)
        if not np.isfinite(log_p):
            raise CtcInfeasibleError("every alignment has zero probability")
        # alpha and beta both include the emission at t, so remove it once
        occupancy = np.where(np.isneginf(alpha) | np.isneginf(beta), -np.inf, alpha + beta - emit)
    grad = np.zeros_like(lp)
    for k in np.unique(ext):
        cols = occupancy[:, ext == k]
        grad[:, k] = -np.exp(np.logaddexp.reduce(cols, axis=1) - log_p)
    return -float(log_p), grad


def ctc_loss(log_probs: Tensor, targets, input_lengths: Optional[Sequence[int]] = None) -> Tensor:
    """CTC negative log-likelihood, blank = last column.

    ``log_probs`` is ``[T, V+1]`` with one target sequence, or ``[B, T, V+1]``
    with a list of sequences; the batched loss is the mean over items, each
    using its first ``input_lengths[b]`` steps. Raises
    :class:`CtcInfeasibleError` rather than returning an infinite loss.
    """
    if log_probs.ndim == 2:
        log_probs = ad.reshape(log_probs, (1,) + log_probs.shape)
        targets = [targets]
    if log_probs.ndim != 3:
        raise ValueError(f"log_probs must be [T, V+1] or [B, T, V+1], got {log_probs.shape}")
    b, t_max, _ = log_probs.shape
    if len(targets) != b:
        raise ValueError(f"{len(targets)} target sequences for batch {b}")
    lengths = [t_max] * b if input_lengths is None else [int(n) for n in input_lengths]
    if len(lengths) != b or any(not 1 <= n <= t_max for n in lengths):
        raise ValueError(f"input lengths must lie in [1, {t_max}]")
    total = 0.0
    grad = np.zeros(log_probs.shape, dtype=np.float64)
    for i, (tgt, n) in enumerate(zip(targets, lengths)):
        loss, g = ctc_grad(log_probs.data[i, :n], tgt)
        total += loss
        grad[i, :n] = g
    grad /= b
    value = np.asarray(total / b, dtype=log_probs.dtype)
    return make_result(value, (log_probs,), lambda g: (g * grad.astype(log_probs.dtype),), "ctc")


def collapse(path: Sequence[int], blank: int) -> tuple:
    """Merge repeated labels, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return tuple(out)


def ctc_brute_force(log_probs, targets: Sequence[int]) -> float:
    """``-log`` of the summed probability of every path that collapses to ``targets``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    tgt = tuple(int(v) for v in _check_ctc(lp, targets))
    t_steps, n_sym = lp.shape
    if n_sym**t_steps > BRUTE_FORCE_LIMIT:
        raise ValueError(f"{n_sym}^{t_steps} paths exceed the enumeration limit of {BRUTE_FORCE_LIMIT}")
    blank = n_sym - 1
    terms = [
        sum(lp[t, s] for t, s in enumerate(path))
        for path in itertools.product(range(n_sym), repeat=t_steps)
        if collapse(path, blank) == tgt
    ]
    if not terms:
        return math.inf
    log_p = np.logaddexp.reduce(np.array(terms))
    return math.inf if log_p == -np.inf else -float(log_p)


# ---------------------------------------------------------------------- AAM


def aam_logits(embedding: Tensor, class_weights: Tensor, y, s: float = AAM_SCALE, m: float = AAM_MARGIN) -> Tensor:
    """Scaled cosines with the target angle widened by ``m`` (capped at pi)."""
    if s <= 0 or not 0 <= m < math.pi / 2:
        raise ValueError("AAM needs s > 0 and 0 <= m < pi/2")
    if embedding.ndim == 1:
        embedding = ad.reshape(embedding, (1, -1))
    if class_weights.ndim != 2 or class_weights.shape[1] != embedding.shape[1]:
        raise ValueError(f"class weights {class_weights.shape} do not match embedding {embedding.shape}")
    b = embedding.shape[0]
    ids = _class_ids(y, class_weights.shape[0], b, "speaker")
    cos = ad.matmul(ad.l2_normalize(embedding, axis=-1), ad.transpose(ad.l2_normalize(class_weights, axis=-1)))
    target = ad.getitem(cos, (np.arange(b), ids))
    bound = 1.0 - 1e-7
    sin = ad.sqrt(1.0 - ad.clamp(target, lo=-bound, hi=bound) ** 2)
    widened = target * math.cos(m) - sin * math.sin(m)
    # beyond theta = pi - m the widened angle would wrap past pi; hold it at cos(pi) = -1
    inside = (target.data > math.cos(math.pi - m)).astype(cos.dtype)
    phi = widened * inside - (1.0 - inside)
    onehot = np.zeros(cos.shape, dtype=cos.dtype)
    onehot[np.arange(b), ids] = 1.0
    phi_full = ad.reshape(phi, (b, 1)) * onehot
    return (cos * (1.0 - onehot) + phi_full) * s


def aam_loss(embedding: Tensor, class_weights: Tensor, y, s: float = AAM_SCALE, m: float = AAM_MARGIN) -> Tensor:
    """Additive angular margin softmax loss, averaged over the batch."""
    return cross_entropy(aam_logits(embedding, class_weights, y, s, m), y, "speaker")


# ----------------------------------------------------------------- mel loss


def mel_loss(x: Tensor, y, d) -> Tensor:
    """Masked mean squared error over frames.

    ``x`` and ``y`` are ``[..., N, bands]`` and ``d`` is a 0/1 frame mask of
    shape ``[..., N]``. Squared errors are summed over bands and kept frames,
    then divided by ``bands * sum(d)``.
    """
    y = ad.as_tensor(y, dtype=x.dtype)
    if x.shape != y.shape:
        raise ValueError(f"prediction {x.shape} and target {y.shape} differ")
    mask = np.asarray(d)
    if mask.shape != x.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match frames {x.shape[:-1]}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    kept = float(mask.sum())
    if kept == 0:
        raise ValueError("mask selects no frames")
    diff = (y - x) * mask[..., None].astype(x.dtype)
    return ad.sum_(diff * diff) / (kept * x.shape[-1])


def length_mask(lengths: Sequence[int], n: int) -> np.ndarray:
    """``[B, n]`` 0/1 mask with the first ``lengths[b]`` frames set."""
    return (np.arange(n)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
