"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


def numerical_grad(f: Callable[[], Tensor], t: Tensor, eps: float, indices) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f().data)
        flat[i] = orig - eps
        down = float(f().data)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError("non-finite value during finite differencing")
        out[n] = (up - down) / (2.0 * eps)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               wrt: Optional[Sequence[Tensor]] = None, max_elements: Optional[int] = None,
               seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    The error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    ``wrt`` adds further leaves (usually parameters) to check alongside ``x``;
    ``max_elements`` samples that many entries per tensor instead of all.
    Requires float64 data.
    """
    targets = [x] + list(wrt or [])
    for t in targets:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f(x)
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in targets:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteError("non-finite analytic gradient")
        idx = np.arange(t.size)
        if max_elements is not None and t.size > max_elements:
            idx = np.sort(rng.choice(t.size, size=max_elements, replace=False))
        numeric = numerical_grad(lambda: f(x), t, eps, idx)
        err = np.abs(analytic[idx] - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
