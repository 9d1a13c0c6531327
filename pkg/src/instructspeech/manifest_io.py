"""JSON-Lines persistence for dataset manifests.

Line 1 is a meta header object; every following line is one record.
Serialization is canonical (sorted keys, no insignificant whitespace,
UTF-8, no ASCII escaping) so equal values always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

from .errors import InputError
from .records import (
    CharSpan,
    ContextualElements,
    DatasetManifest,
    EnrichedRecord,
    Instruction,
    JudgeVerdict,
    ManifestMeta,
    ReasoningChain,
    UtteranceRecord,
)
from .tagging import ParalinguisticEvent, TaggedTranscript

SCHEMA_VERSION = 1


class MalformedLine(InputError):
    def __init__(self, line_no: int, byte_offset: int, reason: str):
        self.line_no = line_no
        self.byte_offset = byte_offset
        super().__init__(f"line {line_no} (byte {byte_offset}): {reason}")


class SchemaVersionMismatch(InputError):
    pass


def dumps_canonical(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def record_to_json(r: EnrichedRecord) -> dict[str, Any]:
    utt = r.utterance
    d: dict[str, Any] = {
        "kind": "record",
        "id": utt.id,
        "audio_ref": utt.audio_ref,
        "transcript": utt.transcript,
        "speaker_id": utt.speaker_id,
        "emotion_labels": list(utt.emotion_labels),
        "acoustic_description": utt.acoustic_description,
        "novel_id": utt.novel_id,
    }
    if utt.alignment is not None:
        d["alignment"] = {"start": utt.alignment.start, "end": utt.alignment.end}
    if r.context is not None:
        d["context"] = context_to_json(r.context)
    if r.instructions:
        d["instructions"] = [instruction_to_json(i) for i in r.instructions]
    if r.verdict is not None:
        d["verdict"] = verdict_to_json(r.verdict)
    if r.reasoning:
        d["reasoning"] = [reasoning_to_json(c) for c in r.reasoning]
    if r.tagged is not None:
        d["tagged"] = tagged_to_json(r.tagged)
    return d


def context_to_json(c: ContextualElements) -> dict[str, str]:
    return {
        "environment": c.environment,
        "current_event": c.current_event,
        "speaker_personality": c.speaker_personality,
        "interlocutor_state": c.interlocutor_state,
        "speaker_intent": c.speaker_intent,
    }


def instruction_to_json(i: Instruction) -> dict[str, Any]:
    return {
        "text": i.text,
        "source_elements": list(i.source_elements),
        "seed_trace": list(i.seed_trace),
    }


def verdict_to_json(v: JudgeVerdict) -> dict[str, Any]:
    return {"emotion_score": v.emotion_score, "acoustic_score": v.acoustic_score, "kept": v.kept}


def reasoning_to_json(c: ReasoningChain) -> dict[str, Any]:
    return {
        "deconstruction": c.deconstruction,
        "inference": c.inference,
        "inferred_emotions": list(c.inferred_emotions),
        "inferred_acoustics": c.inferred_acoustics,
    }


def tagged_to_json(t: TaggedTranscript) -> dict[str, Any]:
    return {
        "raw": t.raw,
        "events": [
            {"category": e.category, "position": e.position, "confidence": e.confidence}
            for e in t.events
        ],
    }


def context_from_json(d: dict[str, Any]) -> ContextualElements:
    return ContextualElements(
        environment=d.get("environment", ""),
        current_event=d.get("current_event", ""),
        speaker_personality=d.get("speaker_personality", ""),
        interlocutor_state=d.get("interlocutor_state", ""),
        speaker_intent=d.get("speaker_intent", ""),
    )


def instruction_from_json(d: dict[str, Any]) -> Instruction:
    seed, record_id, index = d["seed_trace"]
    return Instruction(
        text=d["text"],
        source_elements=tuple(d["source_elements"]),
        seed_trace=(int(seed), str(record_id), int(index)),
    )


def verdict_from_json(d: dict[str, Any]) -> JudgeVerdict:
    return JudgeVerdict(
        emotion_score=int(d["emotion_score"]),
        acoustic_score=int(d["acoustic_score"]),
        kept=bool(d["kept"]),
    )


def reasoning_from_json(d: dict[str, Any]) -> ReasoningChain:
    return ReasoningChain(
        deconstruction=d["deconstruction"],
        inference=d["inference"],
        inferred_emotions=tuple(d["inferred_emotions"]),
        inferred_acoustics=d.get("inferred_acoustics", ""),
    )


def tagged_from_json(d: dict[str, Any]) -> TaggedTranscript:
    events = tuple(
        ParalinguisticEvent(e["category"], int(e["position"]), float(e.get("confidence", 1.0)))
        for e in d["events"]
    )
    return TaggedTranscript(raw=d["raw"], events=events)


def record_from_json(d: dict[str, Any]) -> EnrichedRecord:
    alignment = None
    if d.get("alignment") is not None:
        alignment = CharSpan(int(d["alignment"]["start"]), int(d["alignment"]["end"]))
    utt = UtteranceRecord(
        id=d["id"],
        audio_ref=d["audio_ref"],
        transcript=d["transcript"],
        speaker_id=d["speaker_id"],
        emotion_labels=tuple(d.get("emotion_labels", ())),
        acoustic_description=d.get("acoustic_description", ""),
        novel_id=d["novel_id"],
        alignment=alignment,
    )
    return EnrichedRecord(
        utterance=utt,
        context=context_from_json(d["context"]) if d.get("context") is not None else None,
        instructions=tuple(instruction_from_json(i) for i in d.get("instructions", ())),
        verdict=verdict_from_json(d["verdict"]) if d.get("verdict") is not None else None,
        reasoning=tuple(reasoning_from_json(c) for c in d.get("reasoning", ())),
        tagged=tagged_from_json(d["tagged"]) if d.get("tagged") is not None else None,
    )


def meta_to_json(meta: ManifestMeta) -> dict[str, Any]:
    d: dict[str, Any] = {
        "kind": "meta",
        "schema_version": SCHEMA_VERSION,
        "corpus": meta.corpus,
        "source_hours": meta.source_hours,
        "pipeline_version": meta.pipeline_version,
        "seed": meta.seed,
    }
    if meta.unit_kind is not None:
        d["unit_kind"] = meta.unit_kind
    return d


def meta_from_json(d: dict[str, Any]) -> ManifestMeta:
    return ManifestMeta(
        corpus=d["corpus"],
        source_hours=float(d["source_hours"]),
        pipeline_version=d["pipeline_version"],
        seed=int(d["seed"]),
        unit_kind=d.get("unit_kind"),
    )


def manifest_to_lines(m: DatasetManifest) -> list[str]:
    lines = [dumps_canonical(meta_to_json(m.meta))]
    lines.extend(dumps_canonical(record_to_json(r)) for r in m.records)
    return lines


def write_manifest(m: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in manifest_to_lines(m)), encoding="utf-8")
    os.replace(tmp, path)


def read_manifest(path: str | Path) -> DatasetManifest:
    data = Path(path).read_bytes()
    meta: ManifestMeta | None = None
    records: list[EnrichedRecord] = []
    offset = 0
    for line_no, raw_line in enumerate(data.split(b"\n"), start=1):
        line_offset = offset
        offset += len(raw_line) + 1
        if not raw_line.strip():
            continue
        try:
            obj = json.loads(raw_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedLine(line_no, line_offset, str(exc)) from exc
        if not isinstance(obj, dict):
            raise MalformedLine(line_no, line_offset, "expected a JSON object")
        kind = obj.get("kind")
        if meta is None:
            if kind != "meta":
                raise MalformedLine(line_no, line_offset, "first line must be the meta header")
            version = obj.get("schema_version")
            if version != SCHEMA_VERSION:
                raise SchemaVersionMismatch(
                    f"manifest schema_version {version!r}, supported {SCHEMA_VERSION}"
                )
            try:
                meta = meta_from_json(obj)
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedLine(line_no, line_offset, f"bad meta field: {exc}") from exc
            continue
        if kind != "record":
            raise MalformedLine(line_no, line_offset, f"unexpected kind {kind!r}")
        try:
            records.append(record_from_json(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedLine(line_no, line_offset, f"bad record field: {exc}") from exc
    if meta is None:
        raise MalformedLine(1, 0, "empty manifest: missing meta header")
    return DatasetManifest(meta=meta, records=tuple(records))


def manifest_digest(m: DatasetManifest) -> str:
    """SHA-256 of the canonical serialization; stable across processes."""
    h = hashlib.sha256()
    for line in manifest_to_lines(m):
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
