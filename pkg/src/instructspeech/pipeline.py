"""Resumable pipeline runner with a per-record, per-stage journal.

The journal is two append-only files: a status file with one line per
completed (record, stage) in the form ``record_id<TAB>stage<TAB>status<TAB>hash``
and a payload JSON-Lines sidecar keyed the same way.  Payloads are written
and flushed before their status line, so any status line present on resume
refers to a persisted payload; hashes guard against torn writes.  A
``failed`` status is terminal: resuming never retries a failed record.

Worker count never changes the artifact: records are processed
independently, every random draw is keyed by (seed, record id, index), and
the output manifest is sorted by record id.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .align import AmbiguousMatch, ContextWindow, NotFound, NovelText, extract_context, locate_utterance
from .errors import InputError
from .gateway import Gateway
from .manifest_io import (
    context_from_json,
    context_to_json,
    dumps_canonical,
    instruction_from_json,
    instruction_to_json,
    reasoning_from_json,
    reasoning_to_json,
    tagged_from_json,
    tagged_to_json,
    verdict_from_json,
    verdict_to_json,
)
from .records import CharSpan, DatasetManifest, EnrichedRecord
from .stages import (
    DEFAULT_INSTRUCTIONS_PER_RECORD,
    DEFAULT_K_RANGE,
    StageFailed,
    TooFewElements,
    annotate_reasoning,
    consistency_filter,
    distill_context,
    generate_instruction,
    select_elements,
)
from .tagging import pc_pti_insert
from .vocab import TagVocabulary, default_vocabulary

log = logging.getLogger(__name__)

STAGES = ("align", "distill", "instruct", "filter", "reason", "tag")


def _payload_hash(payload: Any) -> str:
    return hashlib.sha256(dumps_canonical(payload).encode("utf-8")).hexdigest()


_Key = tuple[str, str]


def _load_journal_state(
    path: Path, payload_path: Path
) -> tuple[dict[_Key, str], dict[_Key, Any], dict[_Key, str]]:
    status: dict[_Key, str] = {}
    payloads: dict[_Key, Any] = {}
    errors: dict[_Key, str] = {}
    hashes: dict[_Key, str] = {}
    if path.exists():
        for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            parts = line.split("\t")
            if len(parts) != 4:
                log.warning("journal %s line %d incomplete, ignoring", path, line_no)
                continue
            record_id, stage, state, digest = parts
            status[(record_id, stage)] = state
            hashes[(record_id, stage)] = digest
    if payload_path.exists():
        for line_no, line in enumerate(
            payload_path.read_text(encoding="utf-8").splitlines(), start=1
        ):
            try:
                obj = json.loads(line)
                key = (obj["record_id"], obj["stage"])
            except (json.JSONDecodeError, KeyError, TypeError):
                log.warning("journal payloads %s line %d unreadable, ignoring", payload_path, line_no)
                continue
            if "error" in obj:
                errors[key] = obj["error"]
            else:
                payloads[key] = obj.get("payload")
    # a done status only counts when its payload survived intact
    for key, state in list(status.items()):
        if state != "done":
            continue
        payload = payloads.get(key)
        if payload is None or _payload_hash(payload) != hashes.get(key):
            log.warning("journal: stale payload for %s/%s, stage will re-run", *key)
            del status[key]
            payloads.pop(key, None)
    return status, payloads, errors


def _payload_sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".payloads")


class Journal:
    """Append-only checkpoint store; safe for one process, many threads."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.payload_path = _payload_sidecar(self.path)
        self._lock = threading.Lock()
        self._status, self._payloads, self._errors = _load_journal_state(
            self.path, self.payload_path
        )
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._status_f = self.path.open("a", encoding="utf-8")
        self._payload_f = self.payload_path.open("a", encoding="utf-8")

    @classmethod
    def peek(cls, path: str | Path) -> dict[_Key, str]:
        """Verified journal status without opening (or creating) the files."""
        p = Path(path)
        status, _, _ = _load_journal_state(p, _payload_sidecar(p))
        return status

    def status(self, record_id: str, stage: str) -> str | None:
        return self._status.get((record_id, stage))

    def payload(self, record_id: str, stage: str) -> Any:
        return self._payloads.get((record_id, stage))

    def error(self, record_id: str, stage: str) -> str:
        return self._errors.get((record_id, stage), "unknown failure")

    def record_done(self, record_id: str, stage: str, payload: Any) -> None:
        entry = dumps_canonical({"record_id": record_id, "stage": stage, "payload": payload})
        with self._lock:
            self._payload_f.write(entry + "\n")
            self._payload_f.flush()
            self._status_f.write(f"{record_id}\t{stage}\tdone\t{_payload_hash(payload)}\n")
            self._status_f.flush()
            self._status[(record_id, stage)] = "done"
            self._payloads[(record_id, stage)] = payload

    def record_failed(self, record_id: str, stage: str, reason: str) -> None:
        entry = dumps_canonical({"record_id": record_id, "stage": stage, "error": reason})
        with self._lock:
            self._payload_f.write(entry + "\n")
            self._payload_f.flush()
            self._status_f.write(f"{record_id}\t{stage}\tfailed\t-\n")
            self._status_f.flush()
            self._status[(record_id, stage)] = "failed"
            self._errors[(record_id, stage)] = reason

    def close(self) -> None:
        self._status_f.close()
        self._payload_f.close()

    def __enter__(self) -> "Journal":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class PipelineSettings:
    novels: dict[str, NovelText]
    gateway_generate: Gateway
    gateway_predict: Gateway
    gateway_judge: Gateway
    journal_path: str | Path
    seed: int
    detector: Any = None  # needs .detect(audio_ref) -> list[Detection]
    w: int = 1000
    k_range: tuple[int, int] = DEFAULT_K_RANGE
    instructions_per_record: int = DEFAULT_INSTRUCTIONS_PER_RECORD
    emotion_threshold: int = 6
    acoustic_threshold: int = 5
    theta: float = 0.8
    epsilon: float = 0.02
    workers: int = 1
    until_stage: str = "tag"
    vocab: TagVocabulary = field(default_factory=default_vocabulary)
    progress: Callable[[str, str], None] | None = None  # (record_id, outcome kind)


@dataclass(frozen=True)
class PipelineResult:
    manifest: DatasetManifest
    discarded: tuple[tuple[str, str], ...]  # (record_id, reason)
    failed: tuple[tuple[str, str, str], ...]  # (record_id, stage, reason)

    @property
    def kept(self) -> int:
        return len(self.manifest.records)


def write_discard_log(result: PipelineResult, path: str | Path) -> None:
    lines = []
    for record_id, reason in result.discarded:
        lines.append(dumps_canonical({"id": record_id, "kind": "discarded", "reason": reason}))
    for record_id, stage, reason in result.failed:
        lines.append(
            dumps_canonical({"id": record_id, "kind": "failed", "stage": stage, "reason": reason})
        )
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


class _RecordOutcome:
    def __init__(self, record_id: str):
        self.record_id = record_id
        self.enriched: EnrichedRecord | None = None
        self.discard_reason: str | None = None
        self.fail: tuple[str, str] | None = None  # (stage, reason)


def _window_for(record: EnrichedRecord, span: CharSpan, settings: PipelineSettings) -> ContextWindow:
    novel = settings.novels[record.novel_id]
    return extract_context(novel, span, settings.w)


def _process_record(
    record: EnrichedRecord, settings: PipelineSettings, journal: Journal
) -> _RecordOutcome:
    outcome = _RecordOutcome(record.id)
    utt = record.utterance
    limit = STAGES.index(settings.until_stage)

    for stage in STAGES[: limit + 1]:
        if journal.status(utt.id, stage) == "failed":
            outcome.fail = (stage, journal.error(utt.id, stage))
            return outcome

    def run_stage(stage: str, compute, to_json, from_json):
        """Replay the journal if possible, else compute, journal, and return."""
        if journal.status(utt.id, stage) == "done":
            return from_json(journal.payload(utt.id, stage))
        value = compute()
        journal.record_done(utt.id, stage, to_json(value))
        return value

    try:
        # stage 1a: locate the utterance in its novel
        def compute_span() -> CharSpan:
            if utt.alignment is not None:
                return utt.alignment
            novel = settings.novels[utt.novel_id]
            return locate_utterance(novel, utt.transcript, settings.theta, settings.epsilon)

        span = run_stage(
            "align",
            compute_span,
            lambda s: {"start": s.start, "end": s.end},
            lambda d: CharSpan(d["start"], d["end"]),
        )
        enriched = record.with_utterance(replace(utt, alignment=span))
        if limit >= STAGES.index("distill"):
            context = run_stage(
                "distill",
                lambda: distill_context(utt, _window_for(record, span, settings), settings.gateway_generate),
                context_to_json,
                context_from_json,
            )
            enriched = replace(enriched, context=context)
        if limit >= STAGES.index("instruct"):
            def compute_instructions():
                instructions = []
                for index in range(settings.instructions_per_record):
                    subset = select_elements(
                        context, settings.k_range, (settings.seed, utt.id, index)
                    )
                    instructions.append(
                        generate_instruction(
                            utt, context, subset, settings.gateway_generate, index, settings.seed
                        )
                    )
                return instructions

            instructions = run_stage(
                "instruct",
                compute_instructions,
                lambda items: [instruction_to_json(i) for i in items],
                lambda items: [instruction_from_json(i) for i in items],
            )
            enriched = replace(enriched, instructions=tuple(instructions))
        if limit >= STAGES.index("filter"):
            verdict = run_stage(
                "filter",
                lambda: consistency_filter(
                    utt,
                    context,
                    settings.gateway_predict,
                    settings.gateway_judge,
                    settings.emotion_threshold,
                    settings.acoustic_threshold,
                ),
                verdict_to_json,
                verdict_from_json,
            )
            enriched = replace(enriched, verdict=verdict)
            if not verdict.kept:
                outcome.discard_reason = (
                    f"filter scores emotion={verdict.emotion_score}"
                    f" acoustic={verdict.acoustic_score}"
                )
                outcome.enriched = enriched
                return outcome
        if limit >= STAGES.index("reason"):
            def compute_reasoning():
                return [
                    annotate_reasoning(utt, instruction, settings.gateway_generate, index)
                    for index, instruction in enumerate(instructions)
                ]

            reasoning = run_stage(
                "reason",
                compute_reasoning,
                lambda items: [reasoning_to_json(c) for c in items],
                lambda items: [reasoning_from_json(c) for c in items],
            )
            enriched = replace(enriched, reasoning=tuple(reasoning))
        if limit >= STAGES.index("tag"):
            def compute_tagged():
                if settings.detector is None:
                    raise InputError("tag stage requires a detector backend")
                detections = settings.detector.detect(utt.audio_ref)
                return pc_pti_insert(utt.transcript, detections, settings.vocab)

            tagged = run_stage("tag", compute_tagged, tagged_to_json, tagged_from_json)
            enriched = replace(enriched, tagged=tagged)
        outcome.enriched = enriched
    except (StageFailed, NotFound, AmbiguousMatch, TooFewElements) as exc:
        stage = exc.stage if isinstance(exc, StageFailed) else _current_stage(journal, utt.id, limit)
        journal.record_failed(utt.id, stage, str(exc))
        outcome.fail = (stage, str(exc))
    return outcome


def _current_stage(journal: Journal, record_id: str, limit: int) -> str:
    for stage in STAGES[: limit + 1]:
        if journal.status(record_id, stage) != "done":
            return stage
    return STAGES[limit]


def run_pipeline(manifest: DatasetManifest, settings: PipelineSettings) -> PipelineResult:
    """Run stages align..until_stage for every record; see module docstring."""
    if settings.until_stage not in STAGES:
        raise InputError(f"unknown stage {settings.until_stage!r}")
    missing = {r.novel_id for r in manifest.records} - set(settings.novels)
    if missing:
        raise InputError(f"novels not loaded: {sorted(missing)}")
    ids = [r.id for r in manifest.records]
    if len(set(ids)) != len(ids):
        raise InputError("manifest contains duplicate record ids")

    def process(record: EnrichedRecord) -> _RecordOutcome:
        outcome = _process_record(record, settings, journal)
        if settings.progress is not None:
            kind = "failed" if outcome.fail else "discarded" if outcome.discard_reason else "kept"
            settings.progress(outcome.record_id, kind)
        return outcome

    with Journal(settings.journal_path) as journal:
        if settings.workers <= 1:
            outcomes = [process(r) for r in manifest.records]
        else:
            with ThreadPoolExecutor(max_workers=settings.workers) as pool:
                outcomes = list(pool.map(process, manifest.records))

    kept: list[EnrichedRecord] = []
    discarded: list[tuple[str, str]] = []
    failed: list[tuple[str, str, str]] = []
    for outcome in outcomes:
        if outcome.fail is not None:
            failed.append((outcome.record_id, outcome.fail[0], outcome.fail[1]))
        elif outcome.discard_reason is not None:
            discarded.append((outcome.record_id, outcome.discard_reason))
        else:
            assert outcome.enriched is not None
            kept.append(outcome.enriched)
    kept.sort(key=lambda r: r.id)
    out_meta = replace(
        manifest.meta, seed=settings.seed, pipeline_version=__version__
    )
    out = DatasetManifest(meta=out_meta, records=tuple(kept))
    log.info(
        "pipeline: %d kept, %d discarded, %d failed of %d records",
        len(kept),
        len(discarded),
        len(failed),
        len(manifest.records),
    )
    return PipelineResult(
        manifest=out,
        discarded=tuple(sorted(discarded)),
        failed=tuple(sorted(failed)),
    )
