"""Evaluation suite: grouped anonymous judging, CER, SIM, report tables.

Judging masks system identities: the group is shuffled with a seeded
stream, presented as "System A", "System B", ... and unmasked only after
the reply parses.  Per-sample failures never skew comparisons: a sample
that fails any metric for one system is excluded from that metric for all
systems, and aggregation always runs in sorted sample-id order so floating
point sums are reproducible.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from statistics import fmean
from typing import Any

import numpy as np

from .errors import BackendError, InputError, ToolkitError
from .gateway import (
    ChatRequest,
    DecodeParams,
    FieldSpec,
    Gateway,
    MockReplyMissing,
    StructuredSchema,
    UnparseableAfterRepairs,
)
from .seeding import SeededStream
from .tagging import EmptyReference, strip_tags
from .textnorm import levenshtein, normalize_text
from .vocab import TagVocabulary, default_vocabulary

log = logging.getLogger(__name__)

JUDGE_DECODE = DecodeParams(temperature=0.0)


class InvalidPermutation(ToolkitError):
    def __init__(self, rounds: int, last_reply: str):
        self.rounds = rounds
        self.last_reply = last_reply
        super().__init__(f"judge never produced a strict ranking after {rounds} repairs")


class DimensionMismatch(InputError):
    pass


class ZeroVector(InputError):
    pass


class ScriptMissing(BackendError):
    """A scripted lookup backend has no entry for the requested key."""


@dataclass(frozen=True)
class SystemSample:
    system_name: str
    sample_id: str
    audio_ref: str
    instruction: str
    transcript: str


@dataclass(frozen=True)
class ReferenceSample:
    sample_id: str
    transcript: str
    speaker_id: str
    audio_ref: str
    instruction: str


@dataclass(frozen=True)
class JudgeGroupResult:
    sample_id: str
    scores: dict[str, int]
    ranking: dict[str, int]


_HEADER = re.compile(r"^\[[^\]\n]*\]\s?")


def eval_normalize(text: str, vocab: TagVocabulary | None = None) -> str:
    """Spoken-content normalization: drop tags and emotion headers, then normalize."""
    if vocab is None:
        vocab = default_vocabulary()
    stripped = strip_tags(text, vocab).raw
    stripped = _HEADER.sub("", stripped)
    return normalize_text(stripped)


def cer(reference: str, hypothesis: str, vocab: TagVocabulary | None = None) -> float:
    """Edit distance over normalized spoken content, divided by reference length."""
    ref = eval_normalize(reference, vocab)
    hyp = eval_normalize(hypothesis, vocab)
    if not ref:
        raise EmptyReference("reference empty after normalization")
    return levenshtein(ref, hyp) / len(ref)


def sim(e1, e2) -> float:
    """Cosine similarity, clamped to [-1, 1] against floating point drift."""
    a = np.asarray(e1, dtype=np.float64)
    b = np.asarray(e2, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity undefined for a zero vector")
    return float(np.clip(float(np.dot(a, b)) / (na * nb), -1.0, 1.0))


def _anon_label(index: int) -> str:
    if index < 26:
        return f"System {chr(ord('A') + index)}"
    return f"System {index + 1}"


def judge_group(samples: list[SystemSample], gateway: Gateway, seed: int = 0) -> JudgeGroupResult:
    """Score and rank one sample group of K systems, anonymized and shuffled."""
    if not samples:
        raise InputError("judge group is empty")
    sample_id = samples[0].sample_id
    instruction = samples[0].instruction
    names = [s.system_name for s in samples]
    if len(set(names)) != len(names):
        raise InputError(f"duplicate system in judge group for sample {sample_id}")
    for s in samples:
        if s.sample_id != sample_id or s.instruction != instruction:
            raise InputError(f"judge group for {sample_id} mixes samples or instructions")
    k = len(samples)
    stream = SeededStream("judge_shuffle", str(seed), sample_id)
    shuffled = stream.shuffle(samples)
    labels = [_anon_label(i) for i in range(k)]
    entries = "\n".join(
        f"{label}:\n  audio: {s.audio_ref}\n  transcript: {s.transcript}"
        for label, s in zip(labels, shuffled)
    )
    schema = StructuredSchema(
        {
            "scores": FieldSpec("int_list", lo=0, hi=100, length=k),
            "ranking": FieldSpec("int_list", lo=1, hi=k, length=k),
        }
    )

    def strict_permutation(obj: dict[str, Any]) -> list[str]:
        if sorted(obj["ranking"]) != list(range(1, k + 1)):
            return [f"ranking: must be a strict permutation of 1..{k} with no ties"]
        return []

    req = ChatRequest(
        template_id="eval_judge",
        record_id=sample_id,
        bindings={"instruction": instruction, "count": str(k), "entries": entries},
        decode=JUDGE_DECODE,
        schema=schema,
    )
    try:
        obj = gateway.complete_structured(req, extra=strict_permutation)
    except UnparseableAfterRepairs as exc:
        if exc.errors and all(e.startswith("ranking") for e in exc.errors):
            raise InvalidPermutation(exc.rounds, exc.last_reply) from exc
        raise
    scores = {s.system_name: obj["scores"][i] for i, s in enumerate(shuffled)}
    ranking = {s.system_name: obj["ranking"][i] for i, s in enumerate(shuffled)}
    return JudgeGroupResult(sample_id=sample_id, scores=scores, ranking=ranking)


@dataclass(frozen=True)
class JudgeAggregate:
    k: int
    n: int
    mean_scores: dict[str, float]
    mean_ranks: dict[str, float]


def format_rank(mean_rank: float, k: int) -> str:
    return f"{mean_rank:.2f}/{k}"


def aggregate_judge(results: list[JudgeGroupResult]) -> JudgeAggregate:
    """Arithmetic means per system, accumulated in sorted sample-id order."""
    if not results:
        raise InputError("no judge results to aggregate")
    ordered = sorted(results, key=lambda r: r.sample_id)
    systems = sorted(ordered[0].scores)
    for r in ordered:
        if sorted(r.scores) != systems or sorted(r.ranking) != systems:
            raise InputError(f"judge results for {r.sample_id} cover different systems")
    return JudgeAggregate(
        k=len(systems),
        n=len(ordered),
        mean_scores={name: fmean(r.scores[name] for r in ordered) for name in systems},
        mean_ranks={name: fmean(r.ranking[name] for r in ordered) for name in systems},
    )


@dataclass(frozen=True)
class SystemAggregate:
    system: str
    mean_score: float | None
    mean_rank: float | None
    cer: float | None
    sim: float | None


@dataclass(frozen=True)
class EvalReport:
    systems: tuple[SystemAggregate, ...]
    k: int
    samples_judged: int
    samples_cer: int
    samples_sim: int
    config: dict[str, Any] = field(default_factory=dict)


def run_eval(
    systems: dict[str, list[SystemSample]],
    references: list[ReferenceSample],
    asr_backend,
    embed_backend,
    judge_gateway: Gateway,
    seed: int = 0,
    ground_truth_system: str = "GroundTruth",
    config_echo: dict[str, Any] | None = None,
    vocab: TagVocabulary | None = None,
) -> EvalReport:
    """The full suite over every sample id shared by all systems.

    Per-sample failures are excluded symmetrically: a judge failure drops
    the sample from judge metrics for every system, an ASR/embed failure
    drops it from CER/SIM for every system.  Scripted-backend missing keys
    stay fatal so offline runs cannot silently thin out.
    """
    if vocab is None:
        vocab = default_vocabulary()
    refs = {r.sample_id: r for r in references}
    by_system: dict[str, dict[str, SystemSample]] = {}
    for name, samples in systems.items():
        by_system[name] = {s.sample_id: s for s in samples}
    shared = set(refs)
    for name, per_id in by_system.items():
        shared &= set(per_id)
    for name, per_id in by_system.items():
        missing = set(refs) - set(per_id)
        if missing:
            log.warning("system %s missing %d samples, excluded", name, len(missing))
    shared_ids = sorted(shared)
    if not shared_ids:
        raise InputError("no sample id is covered by every system")
    system_names = list(systems)

    # speaker reference embeddings: mean over the speaker's reference audio
    speaker_refs: dict[str, list[np.ndarray]] = {}
    bad_speakers: set[str] = set()
    for sid in shared_ids:
        ref = refs[sid]
        try:
            vec = np.asarray(embed_backend.embed(ref.audio_ref), dtype=np.float64)
            speaker_refs.setdefault(ref.speaker_id, []).append(vec)
        except (MockReplyMissing, ScriptMissing):
            raise
        except (BackendError, InputError, ValueError) as exc:
            log.warning("reference embedding failed for %s: %s", sid, exc)
            bad_speakers.add(ref.speaker_id)
    speaker_mean = {
        spk: np.mean(np.stack(vecs), axis=0)
        for spk, vecs in speaker_refs.items()
        if spk not in bad_speakers
    }

    judge_results: list[JudgeGroupResult] = []
    cer_rows: dict[str, dict[str, float]] = {name: {} for name in system_names}
    sim_rows: dict[str, dict[str, float]] = {name: {} for name in system_names}
    cer_bad: set[str] = set()
    sim_bad: set[str] = set()
    for sid in shared_ids:
        ref = refs[sid]
        group = [
            SystemSample(
                system_name=name,
                sample_id=sid,
                audio_ref=by_system[name][sid].audio_ref,
                instruction=ref.instruction,
                transcript=by_system[name][sid].transcript,
            )
            for name in system_names
        ]
        try:
            judge_results.append(judge_group(group, judge_gateway, seed))
        except MockReplyMissing:
            raise
        except (UnparseableAfterRepairs, InvalidPermutation) as exc:
            log.warning("judge failed for sample %s, excluded: %s", sid, exc)
        for name in system_names:
            sample = by_system[name][sid]
            try:
                hyp = asr_backend.transcribe(sample.audio_ref)
                cer_rows[name][sid] = cer(ref.transcript, hyp, vocab)
            except (MockReplyMissing, ScriptMissing):
                raise
            except (BackendError, InputError, ValueError) as exc:
                log.warning("CER failed for %s/%s, sample excluded: %s", name, sid, exc)
                cer_bad.add(sid)
            if name == ground_truth_system:
                continue
            if ref.speaker_id not in speaker_mean:
                sim_bad.add(sid)
                continue
            try:
                vec = np.asarray(embed_backend.embed(sample.audio_ref), dtype=np.float64)
                sim_rows[name][sid] = sim(vec, speaker_mean[ref.speaker_id])
            except (MockReplyMissing, ScriptMissing):
                raise
            except (BackendError, InputError, ValueError) as exc:
                log.warning("SIM failed for %s/%s, sample excluded: %s", name, sid, exc)
                sim_bad.add(sid)

    judge_agg = aggregate_judge(judge_results) if judge_results else None
    cer_ids = [sid for sid in shared_ids if sid not in cer_bad]
    sim_ids = [sid for sid in shared_ids if sid not in sim_bad]
    aggregates: list[SystemAggregate] = []
    for name in system_names:
        mean_cer = fmean(cer_rows[name][sid] for sid in cer_ids) if cer_ids else None
        if name == ground_truth_system:
            mean_sim = None
        else:
            mean_sim = fmean(sim_rows[name][sid] for sid in sim_ids) if sim_ids else None
        aggregates.append(
            SystemAggregate(
                system=name,
                mean_score=judge_agg.mean_scores[name] if judge_agg else None,
                mean_rank=judge_agg.mean_ranks[name] if judge_agg else None,
                cer=mean_cer,
                sim=mean_sim,
            )
        )
    return EvalReport(
        systems=tuple(aggregates),
        k=len(system_names),
        samples_judged=judge_agg.n if judge_agg else 0,
        samples_cer=len(cer_ids),
        samples_sim=len(sim_ids),
        config=dict(config_echo or {}),
    )


def report_to_json(report: EvalReport) -> dict[str, Any]:
    return {
        "k": report.k,
        "samples_judged": report.samples_judged,
        "samples_cer": report.samples_cer,
        "samples_sim": report.samples_sim,
        "config": dict(report.config),
        "systems": [
            {
                "system": s.system,
                "mean_score": s.mean_score,
                "mean_rank": s.mean_rank,
                "cer": s.cer,
                "sim": s.sim,
            }
            for s in report.systems
        ],
    }


def report_from_json(d: dict[str, Any]) -> EvalReport:
    try:
        systems = tuple(
            SystemAggregate(
                system=s["system"],
                mean_score=s["mean_score"],
                mean_rank=s["mean_rank"],
                cer=s["cer"],
                sim=s["sim"],
            )
            for s in d["systems"]
        )
        return EvalReport(
            systems=systems,
            k=d["k"],
            samples_judged=d["samples_judged"],
            samples_cer=d["samples_cer"],
            samples_sim=d["samples_sim"],
            config=dict(d.get("config", {})),
        )
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed evaluation report: {exc}") from exc


def _fmt(value: float | None, pattern: str) -> str:
    return "-" if value is None else pattern.format(value)


def render_report(report: EvalReport, fmt: str = "table") -> str:
    """Aligned text table or CSV; best value per column marked with *."""
    if fmt not in ("table", "csv"):
        raise InputError(f"unknown report format {fmt!r}")
    best = {
        "score": _best(report, "mean_score", max),
        "rank": _best(report, "mean_rank", min),
        "cer": _best(report, "cer", min),
        "sim": _best(report, "sim", max),
    }
    rows: list[list[str]] = []
    for agg in report.systems:
        rank = (
            format_rank(agg.mean_rank, report.k) if agg.mean_rank is not None else "-"
        )
        row = [
            agg.system,
            _fmt(agg.mean_score, "{:.2f}"),
            rank,
            _fmt(None if agg.cer is None else agg.cer * 100.0, "{:.2f}"),
            _fmt(agg.sim, "{:.4f}"),
        ]
        marks = [
            agg.mean_score is not None and agg.mean_score == best["score"],
            agg.mean_rank is not None and agg.mean_rank == best["rank"],
            agg.cer is not None and agg.cer == best["cer"],
            agg.sim is not None and agg.sim == best["sim"],
        ]
        if fmt == "table":
            for i, marked in enumerate(marks, start=1):
                if marked:
                    row[i] += "*"
        rows.append(row)
    header = ["System", "Score", "Rank", "CER(%)", "SIM"]
    if fmt == "csv":
        out = [",".join(header)]
        out.extend(",".join(row) for row in rows)
        return "\n".join(out) + "\n"
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)).rstrip(),
        "  ".join("-" * widths[i] for i in range(len(header))),
    ]
    for row in rows:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(len(row))).rstrip())
    meta = (
        f"samples: judged={report.samples_judged}"
        f" cer={report.samples_cer} sim={report.samples_sim}; K={report.k}"
    )
    if report.config:
        meta += "; config: " + ", ".join(f"{k}={v}" for k, v in sorted(report.config.items()))
    lines.append(meta)
    return "\n".join(lines) + "\n"


def _best(report: EvalReport, attr: str, pick) -> float | None:
    values = [getattr(s, attr) for s in report.systems if getattr(s, attr) is not None]
    return pick(values) if values else None
