"""The construction stages: distill, select, instruct, filter, reason.

Every LLM-backed stage validates its reply through the gateway's
structured repair loop; when repairs run out the record is marked failed
via StageFailed and the pipeline moves on.  Per-instruction calls key mock
replies by "record_id:index" so each index can be scripted separately.
"""

from __future__ import annotations

import logging

from .errors import ToolkitError
from .gateway import (
    ChatRequest,
    DecodeParams,
    FieldSpec,
    Gateway,
    StructuredSchema,
    UnparseableAfterRepairs,
)
from .records import (
    ELEMENT_NAMES,
    ContextualElements,
    Instruction,
    JudgeVerdict,
    ReasoningChain,
    UtteranceRecord,
)
from .align import ContextWindow
from .seeding import SeededStream

log = logging.getLogger(__name__)

DEFAULT_K_RANGE = (2, 5)
DEFAULT_INSTRUCTIONS_PER_RECORD = 3

GENERATION_DECODE = DecodeParams(temperature=0.7)
JUDGING_DECODE = DecodeParams(temperature=0.0)


class StageFailed(ToolkitError):
    def __init__(self, record_id: str, stage: str, reason: str):
        self.record_id = record_id
        self.stage = stage
        self.reason = reason
        super().__init__(f"{stage} failed for record {record_id}: {reason}")


class TooFewElements(ToolkitError):
    pass


DISTILL_SCHEMA = StructuredSchema({name: FieldSpec("string") for name in ELEMENT_NAMES})
INSTRUCT_SCHEMA = StructuredSchema({"instruction": FieldSpec("string")})
PREDICT_SCHEMA = StructuredSchema(
    {"predicted_emotions": FieldSpec("list"), "predicted_acoustics": FieldSpec("string")}
)
JUDGE_SCHEMA = StructuredSchema(
    {
        "emotion_score": FieldSpec("int", lo=0, hi=10),
        "acoustic_score": FieldSpec("int", lo=0, hi=10),
    }
)
REASONING_SCHEMA = StructuredSchema(
    {
        "deconstruction": FieldSpec("string"),
        "inference": FieldSpec("string"),
        "inferred_emotions": FieldSpec("list"),
        "inferred_acoustics": FieldSpec("string"),
    }
)


def distill_context(
    record: UtteranceRecord, window: ContextWindow, gateway: Gateway
) -> ContextualElements:
    """Stage 1b: turn the narrative window into the five contextual elements."""
    req = ChatRequest(
        template_id="distill",
        record_id=record.id,
        bindings={
            "speaker_id": record.speaker_id,
            "transcript": record.transcript,
            "pre_context": window.pre,
            "post_context": window.post,
        },
        decode=GENERATION_DECODE,
        schema=DISTILL_SCHEMA,
    )
    try:
        obj = gateway.complete_structured(req)
    except UnparseableAfterRepairs as exc:
        raise StageFailed(record.id, "distill", str(exc)) from exc
    elements = ContextualElements(**{name: obj.get(name, "") for name in ELEMENT_NAMES})
    if not elements.non_empty():
        raise StageFailed(record.id, "distill", "all contextual elements empty")
    return elements


def select_elements(
    elements: ContextualElements,
    k_range: tuple[int, int] = DEFAULT_K_RANGE,
    seed_trace: tuple[int, str, int] = (0, "", 0),
) -> tuple[str, ...]:
    """Draw k uniform in [k_lo, min(k_hi, available)], then a uniform k-subset.

    Fully determined by seed_trace = (global seed, record id, instruction
    index); element order follows the canonical element-name order.
    """
    available = elements.non_empty()
    k_lo, k_hi = k_range
    if len(available) < k_lo:
        raise TooFewElements(
            f"need at least {k_lo} non-empty contextual elements, have {len(available)}"
        )
    seed, record_id, index = seed_trace
    stream = SeededStream("select_elements", str(seed), record_id, str(index))
    k = stream.randint(k_lo, min(k_hi, len(available)))
    return tuple(stream.sample(list(available), k))


def leaked_labels(instruction_text: str, labels: tuple[str, ...]) -> tuple[str, ...]:
    """Ground-truth emotion words appearing verbatim in the instruction."""
    lowered = instruction_text.casefold()
    return tuple(label for label in labels if label and label.casefold() in lowered)


def _render_elements(context: ContextualElements, subset: tuple[str, ...]) -> str:
    lines = []
    for name in ELEMENT_NAMES:
        if name in subset:
            lines.append(f"- {name.replace('_', ' ')}: {getattr(context, name)}")
    return "\n".join(lines)


def generate_instruction(
    record: UtteranceRecord,
    context: ContextualElements,
    subset: tuple[str, ...],
    gateway: Gateway,
    index: int,
    global_seed: int = 0,
) -> Instruction:
    """Stage 2: one director-style instruction from the selected elements."""
    req = ChatRequest(
        template_id="instruct",
        record_id=f"{record.id}:{index}",
        bindings={
            "transcript": record.transcript,
            "elements": _render_elements(context, subset),
        },
        decode=GENERATION_DECODE,
        schema=INSTRUCT_SCHEMA,
    )
    try:
        obj = gateway.complete_structured(
            req, extra=lambda o: [] if o["instruction"].strip() else ["instruction: empty"]
        )
    except UnparseableAfterRepairs as exc:
        raise StageFailed(record.id, "instruct", str(exc)) from exc
    text = obj["instruction"].strip()
    leaks = leaked_labels(text, record.emotion_labels)
    if leaks:
        log.warning("record %s instruction %d leaks labels %s", record.id, index, list(leaks))
    return Instruction(
        text=text, source_elements=subset, seed_trace=(global_seed, record.id, index)
    )


def _render_context(context: ContextualElements) -> str:
    lines = []
    for name in ELEMENT_NAMES:
        value = getattr(context, name)
        if value.strip():
            lines.append(f"- {name.replace('_', ' ')}: {value}")
    return "\n".join(lines)


def consistency_filter(
    record: UtteranceRecord,
    context: ContextualElements,
    gateway_predict: Gateway,
    gateway_judge: Gateway,
    emotion_threshold: int = 6,
    acoustic_threshold: int = 5,
) -> JudgeVerdict:
    """Stage 3: predict attributes from context, judge them against ground truth."""
    predict_req = ChatRequest(
        template_id="predict",
        record_id=record.id,
        bindings={
            "speaker_id": record.speaker_id,
            "transcript": record.transcript,
            "context": _render_context(context),
        },
        decode=GENERATION_DECODE,
        schema=PREDICT_SCHEMA,
    )
    try:
        predicted = gateway_predict.complete_structured(
            predict_req,
            extra=lambda o: [] if o["predicted_emotions"] else ["predicted_emotions: empty"],
        )
    except UnparseableAfterRepairs as exc:
        raise StageFailed(record.id, "filter", f"predictor: {exc}") from exc
    judge_req = ChatRequest(
        template_id="judge_filter",
        record_id=record.id,
        bindings={
            "predicted_emotions": ", ".join(predicted["predicted_emotions"]),
            "predicted_acoustics": predicted["predicted_acoustics"],
            "true_emotions": ", ".join(record.emotion_labels),
            "true_acoustics": record.acoustic_description,
        },
        decode=JUDGING_DECODE,
        schema=JUDGE_SCHEMA,
    )
    try:
        scores = gateway_judge.complete_structured(judge_req)
    except UnparseableAfterRepairs as exc:
        raise StageFailed(record.id, "filter", f"judge: {exc}") from exc
    return JudgeVerdict(
        emotion_score=scores["emotion_score"],
        acoustic_score=scores["acoustic_score"],
        kept=(
            scores["emotion_score"] >= emotion_threshold
            and scores["acoustic_score"] >= acoustic_threshold
        ),
    )


def annotate_reasoning(
    record: UtteranceRecord, instruction: Instruction, gateway: Gateway, index: int = 0
) -> ReasoningChain:
    """Stage 4: two-step chain linking the instruction to vocal attributes."""
    req = ChatRequest(
        template_id="reasoning",
        record_id=f"{record.id}:{index}",
        bindings={"transcript": record.transcript, "instruction": instruction.text},
        decode=GENERATION_DECODE,
        schema=REASONING_SCHEMA,
    )

    def check(obj) -> list[str]:
        errors = []
        if not obj["deconstruction"].strip():
            errors.append("deconstruction: empty")
        if not obj["inference"].strip():
            errors.append("inference: empty (Attribute Inference step required)")
        if not obj["inferred_emotions"]:
            errors.append("inferred_emotions: empty")
        return errors

    try:
        obj = gateway.complete_structured(req, extra=check)
    except UnparseableAfterRepairs as exc:
        raise StageFailed(record.id, "reason", str(exc)) from exc
    return ReasoningChain(
        deconstruction=obj["deconstruction"],
        inference=obj["inference"],
        inferred_emotions=tuple(obj["inferred_emotions"]),
        inferred_acoustics=obj.get("inferred_acoustics", ""),
    )
