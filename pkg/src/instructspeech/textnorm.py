"""Text normalization with per-character origin tracking.

Normalization is the shared preprocessing for utterance/novel matching and
for character error rates: Unicode NFC, case folding, punctuation
canonicalization via a table, and whitespace collapsing.  The mapped variant
additionally returns, for every output character, the index of the source
character it came from, which lets fuzzy matching report spans in the
original (un-normalized) text.

The full pass is applied twice so the function is idempotent even for the
rare code points whose case fold re-opens a composition opportunity.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import InputError


@dataclass(frozen=True)
class NormalizedText:
    """Normalized text plus origin[i] = source index of output char i."""

    text: str
    origin: tuple[int, ...]


def load_punctuation_map(path: str | Path | None = None) -> dict[str, str]:
    """Load a punctuation table (source char TAB replacement, # comments).

    Raises InputError if a source key is not a single character or a
    replacement is not a fixed point of the table.
    """
    if path is None:
        text = (
            resources.files("instructspeech.data")
            .joinpath("punctuation_map.txt")
            .read_text(encoding="utf-8")
        )
    else:
        text = Path(path).read_text(encoding="utf-8")
    table: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        if "\t" not in line:
            raise InputError(f"punctuation map line {line_no}: missing TAB separator")
        src, dst = line.split("\t", 1)
        if len(src) != 1:
            raise InputError(f"punctuation map line {line_no}: source must be one character")
        table[src] = dst
    for src, dst in table.items():
        for ch in dst:
            if table.get(ch, ch) != ch:
                raise InputError(
                    f"punctuation map: replacement {dst!r} for {src!r} is not a fixed point"
                )
    return table


_DEFAULT_TABLE: dict[str, str] | None = None


def default_punctuation_map() -> dict[str, str]:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = load_punctuation_map()
    return _DEFAULT_TABLE


def _clusters(s: str):
    """Yield (cluster, start) where a cluster is a starter plus combining marks."""
    n = len(s)
    i = 0
    while i < n:
        j = i + 1
        while j < n and unicodedata.combining(s[j]):
            j += 1
        yield s[i:j], i
        i = j


def _pass(s: str, origin: tuple[int, ...], table: dict[str, str]) -> tuple[str, tuple[int, ...]]:
    chars: list[str] = []
    char_origin: list[int] = []
    for cluster, start in _clusters(s):
        src = origin[start]
        for ch in unicodedata.normalize("NFC", cluster):
            for folded in ch.casefold():
                for out in table.get(folded, folded):
                    chars.append(out)
                    char_origin.append(src)
    # collapse whitespace runs to a single space and strip the ends
    out_chars: list[str] = []
    out_origin: list[int] = []
    pending_space: int | None = None
    for ch, src in zip(chars, char_origin):
        if ch.isspace():
            if pending_space is None:
                pending_space = src
            continue
        if pending_space is not None and out_chars:
            out_chars.append(" ")
            out_origin.append(pending_space)
        pending_space = None
        out_chars.append(ch)
        out_origin.append(src)
    return "".join(out_chars), tuple(out_origin)


def normalize_with_map(s: str, table: dict[str, str] | None = None) -> NormalizedText:
    """Normalize and keep, per output character, its source index in s."""
    if table is None:
        table = default_punctuation_map()
    text1, origin1 = _pass(s, tuple(range(len(s))), table)
    text2, origin2 = _pass(text1, tuple(range(len(text1))), table)
    composed = tuple(origin1[i] for i in origin2)
    return NormalizedText(text2, composed)


def normalize_text(s: str, table: dict[str, str] | None = None) -> str:
    """Case-folded, NFC, punctuation-canonical, whitespace-collapsed text."""
    return normalize_with_map(s, table).text


def levenshtein(a: str, b: str) -> int:
    """Minimal edit distance (unit-cost substitutions, insertions, deletions)."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(b) < len(a):
        a, b = b, a
    prev = list(range(len(a) + 1))
    cur = [0] * (len(a) + 1)
    for j, cb in enumerate(b, start=1):
        cur[0] = j
        for i, ca in enumerate(a, start=1):
            cur[i] = min(
                prev[i - 1] + (ca != cb),
                prev[i] + 1,
                cur[i - 1] + 1,
            )
        prev, cur = cur, prev
    return prev[len(a)]
