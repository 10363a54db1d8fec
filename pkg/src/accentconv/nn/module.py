"""Parameter containers and the basic layers."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor, get_default_dtype


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def uniform_param(rng: Optional[np.random.Generator], shape, bound: float) -> Parameter:
    # rng=None builds shape-only (zero) parameters, e.g. before loading a checkpoint
    if rng is None:
        return Parameter(np.zeros(shape, dtype=get_default_dtype()))
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(get_default_dtype()))


def const_param(shape, value: float) -> Parameter:
    return Parameter(np.full(shape, value, dtype=get_default_dtype()))


class ShapeMismatchError(ValueError):
    pass


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", False)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif name in self._buffers:
            self._buffers[name] = np.asarray(value)
            return
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value)

    def __getattr__(self, name):
        buffers = self.__dict__.get("_buffers")
        if buffers is not None and name in buffers:
            return buffers[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(f"{prefix}{name}.")

    def num_parameters(self, trainable_only: bool = True) -> int:
        return sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only)

    # -- modes

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- state

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into this module; names and shapes must match exactly."""
        expected = list(self.named_parameters()) + [(n, None) for n, _ in self.named_buffers()]
        missing = [n for n, _ in expected if n not in state]
        if missing:
            raise KeyError(f"state is missing {missing[0]!r} (and {len(missing) - 1} more)")
        known = {n for n, _ in expected}
        extra = [n for n in state if n not in known]
        if extra:
            raise KeyError(f"unexpected entry {extra[0]!r} in state")
        buffer_shapes = {n: b.shape for n, b in self.named_buffers()}
        for name, p in expected:
            shape = p.shape if p is not None else buffer_shapes[name]
            if tuple(state[name].shape) != tuple(shape):
                raise ShapeMismatchError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(state[name].shape)} vs model {tuple(shape)}"
                )
        for name, p in expected:
            if p is not None:
                p.data = np.array(state[name], dtype=p.dtype)
        for name, _ in self.named_buffers():
            self._set_buffer(name, np.array(state[name]))

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        owner = self
        *path, leaf = dotted.split(".")
        for part in path:
            owner = owner._modules[part]
        owner._buffers[leaf] = value


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self) -> int:
        return len(self._modules)

    def __getitem__(self, i: int) -> Module:
        return list(self._modules.values())[i]


class Linear(Module):
    """``y = x W + b`` on the last axis."""

    def __init__(self, d_in: int, d_out: int, rng=None, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = uniform_param(rng, (d_in, d_out), bound)
        self.bias = uniform_param(rng, (d_out,), bound) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng=None, stride: int = 1, padding: int = 0,
                 dilation: int = 1, groups: int = 1, bias: bool = True):
        super().__init__()
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        bound = 1.0 / math.sqrt(c_in // groups * kernel)
        self.weight = uniform_param(rng, (c_out, c_in // groups, kernel), bound)
        self.bias = uniform_param(rng, (c_out,), bound) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class ConvTranspose1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng=None, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding
        bound = 1.0 / math.sqrt(c_out * kernel)
        self.weight = uniform_param(rng, (c_in, c_out, kernel), bound)
        self.bias = uniform_param(rng, (c_out,), bound)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv_transpose1d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = const_param((d,), 1.0)
        self.bias = const_param((d,), 0.0)

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm1d(Module):
    """Batch norm over the channel axis of ``[B, C, T]`` or ``[B, C]`` inputs.

    Training mode normalises with batch statistics and updates the running
    estimates; eval mode uses the frozen running statistics.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = const_param((channels,), 1.0)
        self.bias = const_param((channels,), 0.0)
        self.register_buffer("running_mean", np.zeros(channels, dtype=get_default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        shape = (1, -1, 1) if x.ndim == 3 else (1, -1)
        axes = (0, 2) if x.ndim == 3 else (0,)
        if self.training:
            mu = ad.mean(x, axis=axes, keepdims=True)
            xc = x - mu
            var = ad.mean(xc * xc, axis=axes, keepdims=True)
            n = x.size // x.shape[1]
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu.data.reshape(-1)).astype(self.running_mean.dtype)
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            xhat = xc / ad.sqrt(var + self.eps)
        else:
            mu = self.running_mean.reshape(shape).astype(x.dtype)
            inv = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(shape).astype(x.dtype)
            xhat = (x - mu) * inv
        return xhat * ad.reshape(self.weight, shape) + ad.reshape(self.bias, shape)


class Dropout(Module):
    def __init__(self, p: float, rng=None):
        super().__init__()
        self.p = p
        seed = 0 if rng is None else int(rng.integers(2**31))
        self._rng = np.random.default_rng(seed)

    def reseed(self, seed: int) -> None:
        self._rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.p, self._rng, self.training)
