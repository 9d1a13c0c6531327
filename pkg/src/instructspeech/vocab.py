"""Paralinguistic tag vocabulary.

A vocabulary maps canonical event names (case-sensitive) to their two
rendered forms: the annotation form ``[Name]`` used in enhanced transcripts'
metadata contexts, and the inline form ``<|Name|>`` embedded in running
text.  Parsers case-fold when looking names up and emit canonical casing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import InputError


@dataclass(frozen=True)
class TagEntry:
    canonical_name: str
    annotation_form: str
    inline_form: str


@dataclass(frozen=True)
class TagVocabulary:
    entries: tuple[TagEntry, ...]
    _by_folded: dict[str, TagEntry] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        seen: dict[str, TagEntry] = {}
        for e in self.entries:
            if not e.canonical_name:
                raise InputError("tag vocabulary: empty canonical name")
            key = e.canonical_name.casefold()
            if key in seen:
                raise InputError(f"tag vocabulary: duplicate name {e.canonical_name!r}")
            seen[key] = e
        object.__setattr__(self, "_by_folded", seen)

    def __contains__(self, name: str) -> bool:
        return name.casefold() in self._by_folded

    def lookup(self, name: str) -> TagEntry | None:
        """Case-insensitive lookup; returns the canonical entry or None."""
        return self._by_folded.get(name.casefold())

    def canonical(self, name: str) -> str:
        entry = self.lookup(name)
        if entry is None:
            raise InputError(f"unknown tag name {name!r}")
        return entry.canonical_name

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.canonical_name for e in self.entries)


def make_entry(name: str) -> TagEntry:
    return TagEntry(name, f"[{name}]", f"<|{name}|>")


def load_vocabulary(path: str | Path | None = None) -> TagVocabulary:
    """Load a vocabulary file (canonical|annotation|inline per line, # comments)."""
    if path is None:
        text = (
            resources.files("instructspeech.data")
            .joinpath("tag_vocabulary.txt")
            .read_text(encoding="utf-8")
        )
    else:
        text = Path(path).read_text(encoding="utf-8")
    entries: list[TagEntry] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("|", 2)
        if len(parts) == 1:
            entries.append(make_entry(parts[0]))
            continue
        if len(parts) != 3:
            raise InputError(f"tag vocabulary line {line_no}: expected canonical|annotation|inline")
        canonical, annotation, inline = parts
        expected = make_entry(canonical)
        if annotation != expected.annotation_form or inline != expected.inline_form:
            raise InputError(
                f"tag vocabulary line {line_no}: forms must be [{canonical}] and <|{canonical}|>"
            )
        entries.append(expected)
    return TagVocabulary(tuple(entries))


_DEFAULT: TagVocabulary | None = None


def default_vocabulary() -> TagVocabulary:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_vocabulary()
    return _DEFAULT
