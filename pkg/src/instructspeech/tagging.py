"""Paralinguistic tags: insertion, stripping, matching, and metrics.

Positions are Unicode scalar offsets into the raw transcript, naming the
character BEFORE which a tag is inserted (0..len inclusive).  Rendering
uses the inline form ``<|Name|>`` followed by one separating space unless
nothing follows the tag; stripping removes the tag plus that one space, so
strip(render(insert_tags(raw, events))) recovers (raw, events) exactly
whenever the raw text itself contains no tag renderings.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from statistics import fmean

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError
from .vocab import TagVocabulary, default_vocabulary

DEFAULT_TOLERANCE = 5


class PositionOutOfRange(InputError):
    pass


class EmptyReference(InputError):
    pass


@dataclass(frozen=True)
class ParalinguisticEvent:
    category: str
    position: int
    confidence: float = 1.0


@dataclass(frozen=True)
class TaggedTranscript:
    raw: str
    events: tuple[ParalinguisticEvent, ...]


def _event_order(e: ParalinguisticEvent) -> tuple:
    return (e.position, -e.confidence, e.category)


def insert_tags(
    raw: str,
    events: list[ParalinguisticEvent] | tuple[ParalinguisticEvent, ...],
    vocab: TagVocabulary | None = None,
) -> TaggedTranscript:
    """Order events into a TaggedTranscript over raw.

    Events at the same position are ordered by confidence descending then
    category name.  Categories are canonicalized against the vocabulary.
    """
    if vocab is None:
        vocab = default_vocabulary()
    canonical: list[ParalinguisticEvent] = []
    for e in events:
        if not 0 <= e.position <= len(raw):
            raise PositionOutOfRange(
                f"event {e.category!r} at {e.position}, transcript length {len(raw)}"
            )
        entry = vocab.lookup(e.category)
        if entry is None:
            raise InputError(f"event category {e.category!r} not in vocabulary")
        if not 0.0 <= e.confidence <= 1.0:
            raise InputError(f"event confidence {e.confidence} outside [0,1]")
        canonical.append(replace(e, category=entry.canonical_name))
    canonical.sort(key=_event_order)
    return TaggedTranscript(raw, tuple(canonical))


def render_tagged(t: TaggedTranscript, vocab: TagVocabulary | None = None) -> str:
    """Serialize with inline tags, each followed by one space unless final."""
    if vocab is None:
        vocab = default_vocabulary()
    pieces: list[str] = []
    tag_indices: list[int] = []
    prev = 0
    for e in t.events:
        entry = vocab.lookup(e.category)
        if entry is None:
            raise InputError(f"event category {e.category!r} not in vocabulary")
        pieces.append(t.raw[prev : e.position])
        tag_indices.append(len(pieces))
        pieces.append(entry.inline_form)
        prev = e.position
    pieces.append(t.raw[prev:])
    for i in tag_indices:
        if any(pieces[j] for j in range(i + 1, len(pieces))):
            pieces[i] += " "
    return "".join(pieces)


_NAME_LIKE = re.compile(r"[A-Za-z][A-Za-z0-9_-]*\Z")
_TAG_SCAN = re.compile(r"<\|([^|<>]+)\|>|\[([^\[\]]+)\]")


@dataclass(frozen=True)
class StripResult:
    raw: str
    events: tuple[ParalinguisticEvent, ...]
    unknown_tags: tuple[str, ...] = ()


def strip_tags(tagged_text: str, vocab: TagVocabulary | None = None) -> StripResult:
    """Remove vocabulary tags (inline and annotation forms) from text.

    Each removed tag yields an event positioned in the stripped text; one
    space following a removed tag is consumed with it.  Bracketed tokens
    that look like tag names but are not in the vocabulary are left in
    place and reported.
    """
    if vocab is None:
        vocab = default_vocabulary()
    out: list[str] = []
    out_len = 0
    events: list[ParalinguisticEvent] = []
    unknown: list[str] = []
    pos = 0
    for m in _TAG_SCAN.finditer(tagged_text):
        name = m.group(1) if m.group(1) is not None else m.group(2)
        entry = vocab.lookup(name)
        if entry is None:
            if _NAME_LIKE.match(name):
                unknown.append(name)
            continue
        chunk = tagged_text[pos : m.start()]
        out.append(chunk)
        out_len += len(chunk)
        events.append(ParalinguisticEvent(entry.canonical_name, out_len))
        pos = m.end()
        if pos < len(tagged_text) and tagged_text[pos] == " ":
            pos += 1
    out.append(tagged_text[pos:])
    return StripResult("".join(out), tuple(events), tuple(unknown))


@dataclass(frozen=True)
class EventMatching:
    pairs: tuple[tuple[ParalinguisticEvent, ParalinguisticEvent], ...]
    unmatched_pred: tuple[ParalinguisticEvent, ...]
    unmatched_ref: tuple[ParalinguisticEvent, ...]


def match_events(
    pred: list[ParalinguisticEvent] | tuple[ParalinguisticEvent, ...],
    ref: list[ParalinguisticEvent] | tuple[ParalinguisticEvent, ...],
    tolerance: int = DEFAULT_TOLERANCE,
) -> EventMatching:
    """One-to-one event matching within a category and position tolerance.

    Maximizes the number of matched pairs; among maximum matchings, picks
    one with minimal total position distance.
    """
    if tolerance < 0:
        raise InputError("tolerance must be >= 0")
    matched_pred: set[int] = set()
    matched_ref: set[int] = set()
    pairs: list[tuple[ParalinguisticEvent, ParalinguisticEvent]] = []
    categories = sorted({e.category for e in pred} & {e.category for e in ref})
    for cat in categories:
        p_idx = [i for i, e in enumerate(pred) if e.category == cat]
        r_idx = [j for j, e in enumerate(ref) if e.category == cat]
        big = tolerance * min(len(p_idx), len(r_idx)) + 1
        cost = np.full((len(p_idx), len(r_idx)), big, dtype=np.int64)
        for a, i in enumerate(p_idx):
            for b, j in enumerate(r_idx):
                d = abs(pred[i].position - ref[j].position)
                if d <= tolerance:
                    cost[a, b] = d
        rows, cols = linear_sum_assignment(cost)
        for a, b in zip(rows, cols):
            if cost[a, b] < big:
                i, j = p_idx[a], r_idx[b]
                matched_pred.add(i)
                matched_ref.add(j)
                pairs.append((pred[i], ref[j]))
    return EventMatching(
        tuple(pairs),
        tuple(e for i, e in enumerate(pred) if i not in matched_pred),
        tuple(e for j, e in enumerate(ref) if j not in matched_ref),
    )


def _f1(tp: int, n_pred: int, n_ref: int) -> float:
    if n_pred == 0 and n_ref == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision = tp / n_pred
    recall = tp / n_ref
    return 2 * precision * recall / (precision + recall)


def category_f1(pred, ref) -> float:
    """Micro-F1 over tag categories as multisets; positions ignored."""
    pred_counts: dict[str, int] = {}
    ref_counts: dict[str, int] = {}
    for e in pred:
        pred_counts[e.category] = pred_counts.get(e.category, 0) + 1
    for e in ref:
        ref_counts[e.category] = ref_counts.get(e.category, 0) + 1
    tp = sum(min(n, ref_counts.get(c, 0)) for c, n in pred_counts.items())
    return _f1(tp, len(pred), len(ref))


def position_f1(pred, ref, tolerance: int = DEFAULT_TOLERANCE) -> float:
    """Micro-F1 where a true positive is a matched (category, position) pair."""
    matching = match_events(pred, ref, tolerance)
    return _f1(len(matching.pairs), len(pred), len(ref))


def aps(pred, ref, tolerance: int = DEFAULT_TOLERANCE) -> float | None:
    """Mean absolute position error over matched pairs; None when nothing matches."""
    matching = match_events(pred, ref, tolerance)
    if not matching.pairs:
        return None
    return fmean(abs(p.position - r.position) for p, r in matching.pairs)


def s_cer(tagged_pred: str, raw_ref: str, vocab: TagVocabulary | None = None) -> float:
    """Character error rate of the tag-stripped prediction against the raw reference."""
    from .evaluation import cer

    stripped = strip_tags(tagged_pred, vocab).raw
    return cer(raw_ref, stripped)


@dataclass(frozen=True)
class Detection:
    """A detector's output event; the position may be unresolved."""

    category: str
    confidence: float = 1.0
    position: int | None = None
    candidates: tuple[tuple[int, float], ...] = ()


def resolve_detection(det: Detection, raw_len: int) -> int:
    """Pick the insertion offset for a detection.

    Explicit position wins; otherwise the highest-confidence candidate
    offset (earliest on ties); otherwise the end of the transcript.
    """
    if det.position is not None:
        return det.position
    if det.candidates:
        return max(det.candidates, key=lambda c: (c[1], -c[0]))[0]
    return raw_len


def pc_pti_insert(
    raw: str,
    detections: list[Detection] | tuple[Detection, ...],
    vocab: TagVocabulary | None = None,
) -> TaggedTranscript:
    """Classification-then-insert: place detected events into the true raw text."""
    events = [
        ParalinguisticEvent(d.category, resolve_detection(d, len(raw)), d.confidence)
        for d in detections
    ]
    return insert_tags(raw, events, vocab)


@dataclass(frozen=True)
class TaggerItem:
    sample_id: str
    audio_ref: str
    reference: TaggedTranscript


@dataclass(frozen=True)
class SampleTagMetrics:
    sample_id: str
    c_f1: float | None = None
    p_f1: float | None = None
    aps: float | None = None
    s_cer: float | None = None
    error: str | None = None


@dataclass(frozen=True)
class TaggerReport:
    strategy: str
    tolerance: int
    samples: tuple[SampleTagMetrics, ...]
    aggregates: dict[str, float | None] = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(1 for s in self.samples if s.error is not None)


def evaluate_tagger(
    backend,
    testset: list[TaggerItem] | tuple[TaggerItem, ...],
    vocab: TagVocabulary | None = None,
    tolerance: int = DEFAULT_TOLERANCE,
) -> TaggerReport:
    """Score a tagger backend on items carrying reference tagged transcripts.

    Backend failures are recorded per sample and excluded from aggregates.
    """
    if vocab is None:
        vocab = default_vocabulary()
    strategy = getattr(backend, "strategy", "PC-PTI")
    per_sample: list[SampleTagMetrics] = []
    for item in testset:
        try:
            if strategy == "PC-PTI":
                detections = backend.detect(item.audio_ref)
                tagged = pc_pti_insert(item.reference.raw, detections, vocab)
                pred_text = render_tagged(tagged, vocab)
            elif strategy == "PRI":
                pred_text = backend.tag(item.audio_ref, raw=item.reference.raw)
            elif strategy == "PASR":
                pred_text = backend.tag(item.audio_ref)
            else:
                raise InputError(f"unknown tagger strategy {strategy!r}")
            pred_events = strip_tags(pred_text, vocab).events
            per_sample.append(
                SampleTagMetrics(
                    sample_id=item.sample_id,
                    c_f1=category_f1(pred_events, item.reference.events),
                    p_f1=position_f1(pred_events, item.reference.events, tolerance),
                    aps=aps(pred_events, item.reference.events, tolerance),
                    s_cer=s_cer(pred_text, item.reference.raw, vocab),
                )
            )
        except Exception as exc:  # noqa: BLE001 - per-sample isolation
            per_sample.append(SampleTagMetrics(sample_id=item.sample_id, error=str(exc)))
    ok = [s for s in per_sample if s.error is None]
    with_aps = [s.aps for s in ok if s.aps is not None]
    aggregates: dict[str, float | None] = {
        "c_f1": fmean(s.c_f1 for s in ok) if ok else None,
        "p_f1": fmean(s.p_f1 for s in ok) if ok else None,
        "aps": fmean(with_aps) if with_aps else None,
        "s_cer": fmean(s.s_cer for s in ok) if ok else None,
    }
    return TaggerReport(strategy, tolerance, tuple(per_sample), aggregates)
