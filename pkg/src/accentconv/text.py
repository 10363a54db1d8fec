"""Text normalisation, the fixed-vocabulary tokenizer and greedy CTC decoding."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

BLANK_ID = 128
MAX_VOCAB = 128
SPACE_UNIT = "▁"
UNK_UNIT = "<unk>"

# letters NFKD cannot split into an ASCII base
_TRANSLITERATE = {
    "ß": "ss", "æ": "ae", "Æ": "AE", "ø": "o", "Ø": "O", "œ": "oe", "Œ": "OE",
    "ł": "l", "Ł": "L", "đ": "d", "Đ": "D", "þ": "th", "Þ": "TH", "ð": "d", "Ð": "D", "ı": "i",
}

_ONES = ("zero one two three four five six seven eight nine ten eleven twelve thirteen fourteen "
         "fifteen sixteen seventeen eighteen nineteen").split()
_TENS = "_ _ twenty thirty forty fifty sixty seventy eighty ninety".split()


def number_to_words(n: int) -> str:
    """English cardinal for ``0 <= n <= 9999``."""
    if not 0 <= n <= 9999:
        raise ValueError(f"only 0-9999 can be spelled, got {n}")
    if n < 20:
        return _ONES[n]
    if n < 100:
        tens, ones = divmod(n, 10)
        return _TENS[tens] + ("" if ones == 0 else " " + _ONES[ones])
    if n < 1000:
        hundreds, rest = divmod(n, 100)
        return _ONES[hundreds] + " hundred" + ("" if rest == 0 else " " + number_to_words(rest))
    thousands, rest = divmod(n, 1000)
    return _ONES[thousands] + " thousand" + ("" if rest == 0 else " " + number_to_words(rest))


@dataclass
class Normalized:
    text: str
    unexpanded_numbers: List[str] = field(default_factory=list)


def normalize_report(raw: str) -> Normalized:
    """Like :func:`normalize_text` but also lists digit runs too long to spell out."""
    flagged: List[str] = []

    def spell(m: re.Match) -> str:
        digits = m.group(0)
        if len(digits) > 4:
            flagged.append(digits)
            return f" {digits} "
        return f" {number_to_words(int(digits))} "

    s = "".join(_TRANSLITERATE.get(ch, ch) for ch in raw)
    s = unicodedata.normalize("NFKD", s).encode("ascii", "ignore").decode("ascii")
    s = re.sub(r"[0-9]+", spell, s)
    s = s.lower().replace("'", "")
    s = re.sub(r"[^a-z0-9]+", " ", s)
    return Normalized(" ".join(s.split()), flagged)


def normalize_text(raw: str) -> str:
    """Fold to ASCII, spell out 0-9999, lowercase, drop punctuation, collapse spaces."""
    return normalize_report(raw).text


# ---------------------------------------------------------------- tokenizer


def default_vocab_path():
    return resources.files("accentconv") / "data" / "vocab.txt"


class Tokenizer:
    """Greedy longest-match over a fixed unit list; line index = id, blank = 128."""

    def __init__(self, units: Sequence[str]):
        units = list(units)
        if len(units) > MAX_VOCAB:
            raise ValueError(f"vocabulary has {len(units)} units; at most {MAX_VOCAB} allowed")
        if len(set(units)) != len(units):
            raise ValueError("vocabulary units must be unique")
        if UNK_UNIT not in units:
            raise ValueError(f"vocabulary needs an {UNK_UNIT} unit")
        self.units = units
        self.ids = {u: i for i, u in enumerate(units)}
        self.unk_id = self.ids[UNK_UNIT]
        self.blank_id = BLANK_ID
        self._max_len = max(len(self._surface(u)) for u in units if u != UNK_UNIT)

    @classmethod
    def from_file(cls, path=None) -> "Tokenizer":
        source = default_vocab_path() if path is None else Path(path)
        lines = source.read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])

    @staticmethod
    def _surface(unit: str) -> str:
        return unit.replace(SPACE_UNIT, " ")

    def __len__(self) -> int:
        return len(self.units)

    def encode(self, text: str) -> List[int]:
        out = []
        i = 0
        while i < len(text):
            for size in range(min(self._max_len, len(text) - i), 0, -1):
                piece = text[i:i + size].replace(" ", SPACE_UNIT)
                if piece in self.ids and piece != UNK_UNIT:
                    out.append(self.ids[piece])
                    i += size
                    break
            else:
                out.append(self.unk_id)
                i += 1
        return out

    def decode(self, ids: Sequence[int]) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if i == self.blank_id:
                continue
            if not 0 <= i < len(self.units):
                raise ValueError(f"token id {i} outside the vocabulary")
            parts.append(self._surface(self.units[i]) if i != self.unk_id else "?")
        return "".join(parts)


def collapse_path(path: Sequence[int], blank: int = BLANK_ID) -> List[int]:
    out: List[int] = []
    prev: Optional[int] = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def greedy_ctc_decode(log_probs, tok: Tokenizer) -> str:
    """Argmax per step, merge repeats, drop blanks, then detokenize."""
    lp = np.asarray(log_probs)
    if lp.ndim != 2 or lp.shape[1] != tok.blank_id + 1:
        raise ValueError(f"log_probs must be [T, {tok.blank_id + 1}], got {lp.shape}")
    return tok.decode(collapse_path(np.argmax(lp, axis=1), tok.blank_id))
