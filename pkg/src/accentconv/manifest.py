"""Line-delimited JSON dataset manifests."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

FIELDS = ("audio_filepath", "text", "accent", "gender", "speaker", "duration")
GENDERS = ("female", "male")


class ManifestError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ManifestRecord:
    audio_filepath: str
    text: str
    accent: str
    gender: str
    speaker: str
    duration: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)


def _record(obj, line: int, accent_classes: Optional[Sequence[str]], genders: Sequence[str]) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestError(line, "expected a JSON object")
    for name in FIELDS:
        if name not in obj:
            raise ManifestError(line, f"missing field {name!r}")
    for name in FIELDS[:-1]:
        if not isinstance(obj[name], str):
            raise ManifestError(line, f"field {name!r} must be a string")
    duration = obj["duration"]
    if isinstance(duration, bool) or not isinstance(duration, (int, float)) or not math.isfinite(duration) or duration <= 0:
        raise ManifestError(line, f"duration must be a positive number, got {duration!r}")
    if accent_classes is not None and obj["accent"] not in accent_classes:
        raise ManifestError(line, f"accent {obj['accent']!r} is not a declared class")
    if obj["gender"] not in genders:
        raise ManifestError(line, f"gender {obj['gender']!r} not in {list(genders)}")
    return ManifestRecord(**{name: obj[name] for name in FIELDS[:-1]}, duration=float(duration))


def parse_manifest(path, accent_classes: Optional[Sequence[str]] = None,
                   genders: Sequence[str] = GENDERS) -> List[ManifestRecord]:
    """Parse every line or raise :class:`ManifestError` naming the first bad line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(n, f"malformed JSON ({exc.msg})") from None
            records.append(_record(obj, n, accent_classes, genders))
    return records


def write_manifest(records: Iterable[ManifestRecord], path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def resolve_audio(record: ManifestRecord, manifest_path) -> Path:
    """Audio paths are taken relative to the manifest's directory unless absolute."""
    p = Path(record.audio_filepath)
    return p if p.is_absolute() else Path(manifest_path).parent / p
