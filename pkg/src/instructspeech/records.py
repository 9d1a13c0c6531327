"""Core dataset records: utterances, stage enrichments, and partitioning.

An EnrichedRecord starts as a bare UtteranceRecord and accumulates the
outputs of the construction stages: distilled contextual elements,
generated instructions, a filter verdict, reasoning chains (one per
instruction), and a tagged transcript.  All values are immutable;
enrichment returns new records.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from .errors import InputError
from .tagging import TaggedTranscript
from .vocab import TagVocabulary, default_vocabulary

log = logging.getLogger(__name__)

ELEMENT_NAMES = (
    "environment",
    "current_event",
    "speaker_personality",
    "interlocutor_state",
    "speaker_intent",
)

EMOTION_KEEP_THRESHOLD = 6
ACOUSTIC_KEEP_THRESHOLD = 5


class UnknownNovel(InputError):
    pass


@dataclass(frozen=True)
class CharSpan:
    start: int
    end: int


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_ref: str
    transcript: str
    speaker_id: str
    emotion_labels: tuple[str, ...]
    acoustic_description: str
    novel_id: str
    alignment: CharSpan | None = None


@dataclass(frozen=True)
class ContextualElements:
    environment: str = ""
    current_event: str = ""
    speaker_personality: str = ""
    interlocutor_state: str = ""
    speaker_intent: str = ""

    def non_empty(self) -> tuple[str, ...]:
        return tuple(name for name in ELEMENT_NAMES if getattr(self, name).strip())


@dataclass(frozen=True)
class Instruction:
    text: str
    source_elements: tuple[str, ...]
    seed_trace: tuple[int, str, int]


@dataclass(frozen=True)
class JudgeVerdict:
    emotion_score: int
    acoustic_score: int
    kept: bool

    @classmethod
    def from_scores(cls, emotion_score: int, acoustic_score: int) -> "JudgeVerdict":
        kept = emotion_score >= EMOTION_KEEP_THRESHOLD and acoustic_score >= ACOUSTIC_KEEP_THRESHOLD
        return cls(emotion_score, acoustic_score, kept)


@dataclass(frozen=True)
class ReasoningChain:
    deconstruction: str
    inference: str
    inferred_emotions: tuple[str, ...]
    inferred_acoustics: str


@dataclass(frozen=True)
class EnrichedRecord:
    utterance: UtteranceRecord
    context: ContextualElements | None = None
    instructions: tuple[Instruction, ...] = ()
    verdict: JudgeVerdict | None = None
    reasoning: tuple[ReasoningChain, ...] = ()
    tagged: TaggedTranscript | None = None

    @property
    def id(self) -> str:
        return self.utterance.id

    @property
    def novel_id(self) -> str:
        return self.utterance.novel_id

    def with_utterance(self, utterance: UtteranceRecord) -> "EnrichedRecord":
        return replace(self, utterance=utterance)


@dataclass(frozen=True)
class ManifestMeta:
    corpus: str
    source_hours: float
    pipeline_version: str
    seed: int
    unit_kind: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    meta: ManifestMeta
    records: tuple[EnrichedRecord, ...]

    def novels(self) -> set[str]:
        return {r.novel_id for r in self.records}


@dataclass(frozen=True)
class Partition:
    train_ids: frozenset[str]
    test_ids: frozenset[str]
    held_out_novels: frozenset[str]
    flagged_train_ids: tuple[str, ...] = ()


def validate_record(
    r: UtteranceRecord | EnrichedRecord, vocab: TagVocabulary | None = None
) -> list[str]:
    """List every invariant violation as "field: rule"; empty means valid."""
    if vocab is None:
        vocab = default_vocabulary()
    enriched = r if isinstance(r, EnrichedRecord) else None
    utt = r.utterance if isinstance(r, EnrichedRecord) else r
    violations: list[str] = []
    for name in ("id", "audio_ref", "transcript", "speaker_id", "novel_id"):
        if not getattr(utt, name):
            violations.append(f"{name}: empty")
    for label in utt.emotion_labels:
        if not label.strip():
            violations.append("emotion_labels: contains empty label")
            break
    if utt.alignment is not None:
        if utt.alignment.start < 0:
            violations.append("alignment: start < 0")
        if utt.alignment.end <= utt.alignment.start:
            violations.append("alignment: end must exceed start")
    if enriched is None:
        return violations
    for i, ins in enumerate(enriched.instructions):
        if not ins.text.strip():
            violations.append(f"instructions[{i}].text: empty")
        if not 2 <= len(ins.source_elements) <= 5:
            violations.append(f"instructions[{i}].source_elements: size outside [2,5]")
        for name in ins.source_elements:
            if name not in ELEMENT_NAMES:
                violations.append(f"instructions[{i}].source_elements: unknown element {name!r}")
    if enriched.verdict is not None:
        v = enriched.verdict
        for name in ("emotion_score", "acoustic_score"):
            score = getattr(v, name)
            if not 0 <= score <= 10:
                violations.append(f"verdict.{name}: outside 0-10")
        expected = v.emotion_score >= EMOTION_KEEP_THRESHOLD and (
            v.acoustic_score >= ACOUSTIC_KEEP_THRESHOLD
        )
        if v.kept != expected:
            violations.append("verdict.kept: inconsistent with scores")
    for i, chain in enumerate(enriched.reasoning):
        if not chain.deconstruction.strip():
            violations.append(f"reasoning[{i}].deconstruction: empty")
        if not chain.inference.strip():
            violations.append(f"reasoning[{i}].inference: empty")
        if not chain.inferred_emotions:
            violations.append(f"reasoning[{i}].inferred_emotions: empty")
    if enriched.reasoning and enriched.verdict is not None and not enriched.verdict.kept:
        violations.append("reasoning: present on a record the filter discarded")
    if enriched.tagged is not None:
        t = enriched.tagged
        if t.raw != utt.transcript:
            violations.append("tagged.raw: differs from transcript")
        last = 0
        for j, e in enumerate(t.events):
            if not 0 <= e.position <= len(t.raw):
                violations.append(f"tagged.events[{j}].position: outside transcript")
            if e.position < last:
                violations.append(f"tagged.events[{j}].position: not non-decreasing")
            last = max(last, e.position)
            if e.category not in vocab:
                violations.append(f"tagged.events[{j}].category: not in vocabulary")
            if not 0.0 <= e.confidence <= 1.0:
                violations.append(f"tagged.events[{j}].confidence: outside [0,1]")
    return violations


def validate_manifest(m: DatasetManifest, vocab: TagVocabulary | None = None) -> list[str]:
    """Record-level violations prefixed by id, plus manifest-level checks."""
    violations: list[str] = []
    seen: set[str] = set()
    for r in m.records:
        for v in validate_record(r, vocab):
            violations.append(f"{r.id}: {v}")
        if r.id in seen:
            violations.append(f"{r.id}: id: duplicate")
        seen.add(r.id)
    return violations


def partition_dataset(
    m: DatasetManifest,
    held_out_novels: set[str] | frozenset[str],
    instructions_per_train_record: int,
) -> Partition:
    """Split by novel: held-out novels form the test set, the rest train.

    Train records carrying fewer than instructions_per_train_record
    instructions stay in train but are flagged.
    """
    if instructions_per_train_record < 1:
        raise InputError("instructions_per_train_record must be >= 1")
    present = m.novels()
    missing = set(held_out_novels) - present
    if missing:
        raise UnknownNovel(f"held-out novels absent from manifest: {sorted(missing)}")
    train: list[str] = []
    test: list[str] = []
    flagged: list[str] = []
    for r in m.records:
        if r.novel_id in held_out_novels:
            test.append(r.id)
        else:
            train.append(r.id)
            if len(r.instructions) < instructions_per_train_record:
                flagged.append(r.id)
    if not train:
        log.warning("partition: every novel held out, train set is empty")
    if flagged:
        log.warning(
            "partition: %d train records carry fewer than %d instructions",
            len(flagged),
            instructions_per_train_record,
        )
    return Partition(
        train_ids=frozenset(train),
        test_ids=frozenset(test),
        held_out_novels=frozenset(held_out_novels),
        flagged_train_ids=tuple(flagged),
    )
