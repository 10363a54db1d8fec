"""Key/value configuration files.

One ``key = value`` per line, ``#`` comments::

    preset = toy
    seed = 3
    preset.n_accents = 4
    preset.jasper_widths = 32, 48, 64
    dsp.hop_size = 256
    train.stp.steps = 200
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

from .audio import DspConfig
from .nn import BlockPreset, get_preset
from .training import STAGES, TrainConfig, default_config

_SECTION = "config"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: BlockPreset = field(default_factory=lambda: get_preset("toy"))
    dsp: DspConfig = field(default_factory=DspConfig)
    seed: int = 0
    train: Dict[str, TrainConfig] = field(default_factory=dict)

    def train_config(self, stage: str) -> TrainConfig:
        return self.train.get(stage) or default_config(stage)


def _convert(cls, name: str, raw: str):
    hints = typing.get_type_hints(cls)
    if name not in hints:
        raise ConfigError(f"{cls.__name__} has no field {name!r}")
    kind = hints[name]
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    try:
        if origin is tuple:
            return tuple(args[0](v.strip()) for v in raw.split(",") if v.strip())
        if origin is typing.Union:  # Optional[x]
            if raw.strip().lower() in ("none", ""):
                return None
            kind = next(a for a in args if a is not type(None))
        if kind is bool:
            if raw.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.strip().lower() in ("true", "1", "yes")
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"cannot read {raw!r} as the {cls.__name__}.{name} value") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                   default_section="__unused__")
    try:
        cp.read_string(f"[{_SECTION}]\n{text}")
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"line {lineno - 1}: expected 'key = value', got {line}") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values = dict(cp[_SECTION])
    preset_over, dsp_over, train_over = {}, {}, {}
    name = values.pop("preset", "toy").strip()
    seed = values.pop("seed", "0")
    for key, raw in values.items():
        group, _, rest = key.partition(".")
        if group == "preset" and rest:
            preset_over[rest] = _convert(BlockPreset, rest, raw)
        elif group == "dsp" and rest:
            dsp_over[rest] = _convert(DspConfig, rest, raw)
        elif group == "train" and rest.count(".") == 1:
            stage, _, fname = rest.partition(".")
            if stage not in STAGES:
                raise ConfigError(f"unknown training stage {stage!r} in {key!r}")
            train_over.setdefault(stage, {})[fname] = _convert(TrainConfig, fname, raw)
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        preset = get_preset(name, **preset_over)
        dsp = DspConfig(**{"n_mels": preset.n_mels, **dsp_over})
        train = {s: default_config(s, **o) for s, o in train_over.items()}
        return RunConfig(preset, dsp, int(seed), train)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    """Only fields that differ from the named preset's defaults are written."""
    base = get_preset(cfg.preset.name)
    lines = [f"preset = {cfg.preset.name}", f"seed = {cfg.seed}"]
    for f in dataclasses.fields(BlockPreset):
        value = getattr(cfg.preset, f.name)
        if f.name != "name" and value != getattr(base, f.name):
            text = ", ".join(map(str, value)) if isinstance(value, tuple) else str(value)
            lines.append(f"preset.{f.name} = {text}")
    default_dsp = DspConfig(n_mels=cfg.preset.n_mels)
    for f in dataclasses.fields(DspConfig):
        if getattr(cfg.dsp, f.name) != getattr(default_dsp, f.name):
            lines.append(f"dsp.{f.name} = {getattr(cfg.dsp, f.name)}")
    for stage, tc in sorted(cfg.train.items()):
        base_tc = default_config(stage)
        for f in dataclasses.fields(TrainConfig):
            if getattr(tc, f.name) != getattr(base_tc, f.name):
                lines.append(f"train.{stage}.{f.name} = {getattr(tc, f.name)}")
    return "\n".join(lines) + "\n"
