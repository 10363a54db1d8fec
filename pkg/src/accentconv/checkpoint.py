"""Flat binary checkpoints.

Layout, all integers little-endian::

    b"ACVC"  uint32 version  uint32 metadata_len  metadata (UTF-8 JSON)
    uint32 n_entries
    per entry: uint16 name_len  name (UTF-8)  uint8 ndim  uint32 dims[ndim]
               uint64 payload_len  float32 data (row-major, little-endian)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .audio import DspConfig
from .models import ModelBundle, build_bundle
from .nn import Module, get_preset

MAGIC = b"ACVC"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path, tensors: Dict[str, np.ndarray], metadata: Optional[dict] = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(meta)) + meta + struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(value).astype(_F32, order="C")  # keeps 0-d shapes
            raw_name = name.encode("utf-8")
            if len(raw_name) > 0xFFFF or arr.ndim > 255:
                raise CheckpointError(f"cannot store entry {name!r}")
            fh.write(struct.pack("<H", len(raw_name)) + raw_name)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(struct.pack("<Q", arr.nbytes))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(memoryview(Path(path).read_bytes()))
    if bytes(r.data[:4]) != MAGIC:
        raise BadMagicError(f"{path}: not an ACVC checkpoint")
    r.pos = 4
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, this reader handles {VERSION}")
    try:
        metadata = json.loads(bytes(r.take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    (count,) = r.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = bytes(r.take(name_len)).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (n_bytes,) = r.unpack("<Q")
        expected = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        if n_bytes != expected:
            raise CheckpointError(f"{path}: entry {name!r} declares {n_bytes} bytes, shape needs {expected}")
        tensors[name] = np.frombuffer(r.take(n_bytes), dtype=_F32).reshape(shape).astype(np.float32, copy=True)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return Checkpoint(tensors, metadata)


def check_shapes(expected: Dict[str, np.ndarray], found: Dict[str, np.ndarray]) -> None:
    """Raise naming the first entry (in the model's order) whose shape differs."""
    for name, value in expected.items():
        if name in found and tuple(found[name].shape) != tuple(np.shape(value)):
            raise CheckpointShapeError(
                f"shape mismatch for {name!r}: checkpoint {tuple(found[name].shape)}, model {tuple(np.shape(value))}")


# ----------------------------------------------------------------- bundles


def _dsp_dict(cfg: DspConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def save_bundle(bundle: ModelBundle, path, extra: Optional[dict] = None) -> None:
    meta = {
        "preset": bundle.preset.name,
        "ablation": bundle.ablation,
        "dsp": _dsp_dict(bundle.dsp),
        "trained_stages": sorted(bundle.trained_stages),
        "mel_normalization": "none",
    }
    meta.update(extra or {})
    save_checkpoint(path, bundle.state_dict(), meta)


def load_into(target, ckpt: Checkpoint) -> None:
    """Load into a module or bundle after checking every shape."""
    check_shapes(target.state_dict(), ckpt.tensors)
    target.load_state_dict(ckpt.tensors)


def load_bundle(path, preset: Optional[str] = None) -> ModelBundle:
    """Rebuild the bundle described by the checkpoint metadata and load it.

    ``preset`` forces a preset, which surfaces a shape error if it differs
    from the one the checkpoint was written with.
    """
    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    name = preset or meta.get("preset", "toy")
    dsp = DspConfig(**meta["dsp"]) if "dsp" in meta else None
    bundle = build_bundle(get_preset(name), seed=None, ablation=bool(meta.get("ablation", False)), dsp=dsp)
    load_into(bundle, ckpt)
    bundle.trained_stages.update(meta.get("trained_stages", []))
    return bundle.eval()


def save_module(module: Module, path, metadata: Optional[dict] = None) -> None:
    save_checkpoint(path, module.state_dict(), metadata)
