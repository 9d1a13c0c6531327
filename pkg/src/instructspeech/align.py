"""Novel alignment: find each utterance in its source text, extract context.

Matching runs in normalized space (see textnorm) and reports spans in the
original novel text via the normalization origin map.  Similarity between
the transcript and a candidate window is normalized edit similarity
1 - dist/max(len).  One semi-global DP pass bounds the best achievable
similarity for every window end; only ends whose bound can still reach
the running best (within epsilon) get an exact per-end DP, so the search
is exact yet far cheaper than scoring every window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ToolkitError
from .records import CharSpan
from .textnorm import normalize_text, normalize_with_map

log = logging.getLogger(__name__)

DEFAULT_THETA = 0.8
DEFAULT_EPSILON = 0.02

_HAN_RANGES = (
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFAFF),
)


class NotFound(ToolkitError):
    def __init__(self, best_score: float):
        self.best_score = best_score
        super().__init__(f"no span reached the similarity threshold (best {best_score:.3f})")


class AmbiguousMatch(ToolkitError):
    def __init__(self, candidates: list[tuple[CharSpan, float]]):
        self.candidates = candidates
        spots = ", ".join(f"[{c.start},{c.end}) {s:.3f}" for c, s in candidates)
        super().__init__(f"multiple non-overlapping spans tie: {spots}")


def _is_han(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _HAN_RANGES)


def detect_unit_kind(text: str) -> str:
    """"char" when Han characters dominate, else whitespace "word" units."""
    visible = [ch for ch in text if not ch.isspace()]
    if not visible:
        return "word"
    han = sum(1 for ch in visible if _is_han(ch))
    return "char" if han / len(visible) > 0.3 else "word"


def segment_units(text: str, unit_kind: str) -> list[tuple[int, int]]:
    """Spans of context units: whitespace-delimited words, or single visible chars."""
    if unit_kind == "word":
        spans: list[tuple[int, int]] = []
        start = None
        for i, ch in enumerate(text):
            if ch.isspace():
                if start is not None:
                    spans.append((start, i))
                    start = None
            elif start is None:
                start = i
        if start is not None:
            spans.append((start, len(text)))
        return spans
    if unit_kind == "char":
        return [(i, i + 1) for i, ch in enumerate(text) if not ch.isspace()]
    raise InputError(f"unknown unit kind {unit_kind!r}")


@dataclass(frozen=True)
class NovelText:
    novel_id: str
    text: str
    unit_kind: str
    unit_index: tuple[int, ...]

    @classmethod
    def from_text(cls, novel_id: str, text: str, unit_kind: str | None = None) -> "NovelText":
        kind = unit_kind or detect_unit_kind(text)
        spans = segment_units(text, kind)
        # cut points: unit i owns [cut[i], cut[i+1]), covering the whole text
        cuts = [0] + [s for s, _ in spans[1:]] if spans else []
        return cls(novel_id, text, kind, tuple(cuts))

    @classmethod
    def from_file(cls, path: str | Path, unit_kind: str | None = None) -> "NovelText":
        path = Path(path)
        return cls.from_text(path.stem, path.read_text(encoding="utf-8"), unit_kind)

    @property
    def unit_count(self) -> int:
        return len(self.unit_index)


def load_novels(novels_dir: str | Path, unit_kind: str | None = None) -> dict[str, NovelText]:
    """One novel per .txt file; the filename stem is the novel id."""
    novels: dict[str, NovelText] = {}
    for path in sorted(Path(novels_dir).glob("*.txt")):
        novel = NovelText.from_file(path, unit_kind)
        novels[novel.novel_id] = novel
    if not novels:
        raise InputError(f"no .txt novels found in {novels_dir}")
    return novels


@dataclass(frozen=True)
class ContextWindow:
    pre: str
    post: str
    w: int


def extract_context(novel: NovelText, span: CharSpan, w: int) -> ContextWindow:
    """Up to w units on each side of the span, never touching the span itself."""
    if w < 0:
        raise InputError("window size must be >= 0")
    if not 0 <= span.start < span.end <= len(novel.text):
        raise InputError(f"span [{span.start},{span.end}) outside novel {novel.novel_id}")
    pre_text = novel.text[: span.start]
    post_text = novel.text[span.end :]
    pre = ""
    if w:
        pre_units = segment_units(pre_text, novel.unit_kind)
        if pre_units:
            pre = pre_text[pre_units[max(0, len(pre_units) - w)][0] :]
        post_units = segment_units(post_text, novel.unit_kind)
        post = post_text[: post_units[min(w, len(post_units)) - 1][1]] if post_units else ""
    else:
        post = ""
    return ContextWindow(pre=pre, post=post, w=w)


def _suffix_distances(query: str, text: str, start: int, max_len: int) -> np.ndarray:
    """dist(query, text[start:start+L]) for L = 0..max_len, one DP over the suffix."""
    window = text[start : start + max_len]
    codes = np.frombuffer(window.encode("utf-32-le"), dtype=np.uint32)
    n = len(codes)
    row = np.arange(n + 1, dtype=np.int64)
    for ch in query:
        cost = (codes != ord(ch)).astype(np.int64)
        base = np.minimum(row[:-1] + cost, row[1:] + 1)
        shifted = np.empty(n + 1, dtype=np.int64)
        shifted[0] = row[0] + 1
        shifted[1:] = base
        steps = np.arange(n + 1, dtype=np.int64)
        row = np.minimum.accumulate(shifted - steps) + steps
    return row


def _best_window_at(query: str, text: str, start: int, max_len: int) -> tuple[float, int]:
    """(best similarity, end) over windows text[start:end] with end-start <= max_len."""
    dists = _suffix_distances(query, text, start, max_len)
    lengths = np.arange(len(dists))
    denoms = np.maximum(lengths, len(query))
    if len(query) == 0:
        return 1.0, start
    sims = 1.0 - dists / denoms
    best = int(np.argmax(sims))
    return float(sims[best]), start + best


def _end_distances(query: str, text: str) -> np.ndarray:
    """min dist(query, window) over windows ending at j, for j = 0..len(text).

    Same recurrence as _suffix_distances but with a free window start (row
    of zeros), i.e. semi-global alignment of the query into the text.
    """
    codes = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32)
    n = len(codes)
    steps = np.arange(n + 1, dtype=np.int64)
    row = np.zeros(n + 1, dtype=np.int64)
    for ch in query:
        cost = (codes != ord(ch)).astype(np.int64)
        base = np.minimum(row[:-1] + cost, row[1:] + 1)
        shifted = np.empty(n + 1, dtype=np.int64)
        shifted[0] = row[0] + 1
        shifted[1:] = base
        row = np.minimum.accumulate(shifted - steps) + steps
    return row


def _best_window_ending_at(query: str, text: str, end: int, max_len: int) -> tuple[float, int]:
    """(best similarity, start) over windows text[start:end] with end-start <= max_len."""
    lo = max(0, end - max_len)
    reversed_window = text[lo:end][::-1]
    sim, length = _best_window_at(query[::-1], reversed_window, 0, end - lo)
    return sim, end - length


def _collect_candidates(q: str, t: str, max_len: int, epsilon: float) -> list[tuple[float, int, int]]:
    """Every window within epsilon of the best similarity, exactly scored.

    A window ending at j has similarity at most 1 - end_dist[j]/len(q);
    ends are visited best-bound first and the scan stops once no remaining
    bound can come within epsilon of the best exact score found.
    """
    bounds = 1.0 - _end_distances(q, t) / len(q)
    order = np.argsort(-bounds, kind="stable")
    found: list[tuple[float, int, int]] = []
    best = 0.0
    for j in order:
        if bounds[j] < best - epsilon:
            break
        sim, start = _best_window_ending_at(q, t, int(j), max_len)
        found.append((sim, start, int(j)))
        best = max(best, sim)
    return found


def _cluster_best(
    candidates: list[tuple[float, int, int]], epsilon: float
) -> list[tuple[float, int, int]]:
    """Representatives of non-overlapping candidate groups within epsilon of the top."""
    best = max(c[0] for c in candidates)
    near = sorted(
        (c for c in candidates if c[0] >= best - epsilon), key=lambda c: (-c[0], c[1])
    )
    reps: list[tuple[float, int, int]] = []
    for sim, s, e in near:
        if all(e <= rs or re <= s for _, rs, re in reps):
            reps.append((sim, s, e))
    return reps


def locate_utterance(
    novel: NovelText,
    transcript: str,
    theta: float = DEFAULT_THETA,
    epsilon: float = DEFAULT_EPSILON,
) -> CharSpan:
    """Best-matching span of the transcript in the original novel text.

    Raises NotFound(best_score) when the best similarity is below theta and
    AmbiguousMatch when two or more non-overlapping spans tie within
    epsilon of the best.  The best score is always exact.
    """
    if not transcript.strip():
        raise InputError("transcript is empty")
    q = normalize_text(transcript)
    if not q:
        raise InputError("transcript is empty after normalization")
    norm = normalize_with_map(novel.text)
    t = norm.text
    if not t:
        raise NotFound(0.0)
    # windows longer than this cap cannot score within epsilon of theta
    max_len = min(len(t), math.ceil(len(q) / max(theta - epsilon, 0.05)) + 2)
    candidates = _collect_candidates(q, t, max_len, epsilon)
    best = max(c[0] for c in candidates)
    if best < theta:
        # uncapped re-scan so the reported best score is exact
        candidates = _collect_candidates(q, t, len(t), epsilon)
        best = max(c[0] for c in candidates)
        if best < theta:
            raise NotFound(best)
    reps = _cluster_best(candidates, epsilon)
    if len(reps) > 1:
        raise AmbiguousMatch([(_to_original(norm.origin, s, e), sim) for sim, s, e in reps])
    _, s, e = reps[0]
    return _to_original(norm.origin, s, e)


def _to_original(origin: tuple[int, ...], start: int, end: int) -> CharSpan:
    if end <= start:
        end = start + 1
    start = min(start, len(origin) - 1)
    end = min(end, len(origin))
    return CharSpan(origin[start], origin[end - 1] + 1)
