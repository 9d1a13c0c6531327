"""Acceptance gate: one test per shipped guarantee.

Each test prints a PASS/FAIL line with its measured runtime (visible with
pytest -s; pytest -v shows the per-criterion verdict either way) and fails
if the work exceeds its runtime budget.
"""

import json
import random
import time
from collections import Counter
from contextlib import contextmanager
from statistics import fmean

from instructspeech.align import load_novels
from instructspeech.backends import ScriptedAsrBackend, ScriptedDetector, ScriptedEmbedBackend
from instructspeech.evaluation import (
    EvalReport,
    JudgeGroupResult,
    ReferenceSample,
    SystemAggregate,
    SystemSample,
    aggregate_judge,
    cer,
    eval_normalize,
    format_rank,
    report_to_json,
    run_eval,
)
from instructspeech.gateway import Gateway, MockChatBackend, load_templates, write_mock_reply
from instructspeech.genseq import (
    EnhancedTranscript,
    TepSequence,
    ThinkBlock,
    interleave,
    parse_enhanced,
    parse_tep,
    render_tep,
)
from instructspeech.manifest_io import manifest_digest
from instructspeech.pipeline import PipelineSettings, run_pipeline
from instructspeech.records import (
    ContextualElements,
    DatasetManifest,
    EnrichedRecord,
    Instruction,
    JudgeVerdict,
    ManifestMeta,
    UtteranceRecord,
    partition_dataset,
)
from instructspeech.seeding import SeededStream
from instructspeech.stages import select_elements
from instructspeech.tagging import (
    ParalinguisticEvent,
    insert_tags,
    render_tagged,
    s_cer,
    strip_tags,
    aps,
    category_f1,
    position_f1,
)

from . import mini_corpus
from .oracles import brute_aps, brute_category_f1, brute_position_f1, edit_distance


@contextmanager
def criterion(name, budget_s):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"FAIL  {name}")
        raise
    elapsed = time.perf_counter() - start
    assert elapsed < budget_s, f"{name}: {elapsed:.2f}s exceeded the {budget_s}s budget"
    print(f"PASS  {name}  ({elapsed:.2f}s < {budget_s}s)")


def test_c01_consistency_thresholds():
    with criterion("consistency thresholds, full score grid", 1.0):
        cases = 0
        for e in range(11):
            for a in range(11):
                assert JudgeVerdict.from_scores(e, a).kept == (e >= 6 and a >= 5)
                cases += 1
        assert cases == 121


RAW_CHARS = "abcdefgh XY.,!?'"
CATS = ("Laughter", "Cough", "Breathing", "Sigh", "Whisper")


def test_c02_tag_round_trip_and_text_integrity():
    rng = random.Random(2002)
    with criterion("tag round-trip and tagger text integrity, 10000 pairs", 10.0):
        for _ in range(10_000):
            raw = "".join(rng.choice(RAW_CHARS) for _ in range(rng.randint(0, 60)))
            events = [
                ParalinguisticEvent(rng.choice(CATS), rng.randint(0, len(raw)))
                for _ in range(rng.randint(0, 4))
            ]
            tagged = insert_tags(raw, events)
            wire = render_tagged(tagged)
            got = strip_tags(wire)
            assert got.raw == raw
            assert got.events == tagged.events
            assert Counter((e.category, e.position) for e in got.events) == Counter(
                (e.category, e.position) for e in events
            )
            if raw.strip():
                assert s_cer(wire, raw) == 0.0


def test_c03_tag_metrics_match_exhaustive_oracle():
    rng = random.Random(2003)
    with criterion("tag metrics vs exhaustive matching oracle, 1000 instances", 30.0):
        for _ in range(1_000):
            tol = rng.randint(0, 8)
            pred = [
                ParalinguisticEvent(rng.choice(CATS), rng.randint(0, 40))
                for _ in range(rng.randint(0, 6))
            ]
            ref = [
                ParalinguisticEvent(rng.choice(CATS), rng.randint(0, 40))
                for _ in range(rng.randint(0, 6))
            ]
            p = [(e.category, e.position) for e in pred]
            r = [(e.category, e.position) for e in ref]
            assert abs(category_f1(pred, ref) - brute_category_f1(p, r)) <= 1e-12
            assert abs(position_f1(pred, ref, tol) - brute_position_f1(p, r, tol)) <= 1e-12
            got = aps(pred, ref, tol)
            want = brute_aps(p, r, tol)
            if want is None:
                assert got is None
            else:
                assert abs(got - want) <= 1e-12


def test_c04_cer_matches_dp_oracle():
    rng = random.Random(2004)
    alphabet = "abcdef "
    with criterion("CER vs full DP edit-distance oracle, 1000 pairs", 10.0):
        assert cer("abcd", "abed") == 0.25
        assert cer("ab", "abcdef") == 2.0
        checked = 0
        while checked < 1_000:
            ref = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 50)))
            hyp = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 50)))
            ref_n = eval_normalize(ref)
            if not ref_n:
                continue
            expected = edit_distance(ref_n, eval_normalize(hyp)) / len(ref_n)
            assert cer(ref, hyp) == expected
            checked += 1


SERVANT = "[doubt, contempt, displeasure] Why did you <|Breathing|> choose such a servant?"
MODES = ("plain", "T", "EP", "TEP")
LABELS = ("calm", "doubt", "joyful anger", "weary")
SEQ_RAW = "abcdefg .,!?']"


def random_tep(rng, mode):
    enhanced_mode = mode in ("EP", "TEP")
    raw = "".join(rng.choice(SEQ_RAW) for _ in range(rng.randint(0, 30)))
    events = []
    emotions = ()
    if enhanced_mode:
        events = [
            ParalinguisticEvent(rng.choice(CATS), rng.randint(0, len(raw)))
            for _ in range(rng.randint(0, 3))
        ]
        emotions = tuple(rng.choice(LABELS) for _ in range(rng.randint(1, 3)))
    think = None
    if mode in ("T", "TEP"):
        while True:
            text = "".join(rng.choice("abc xyz<|>\n") for _ in range(rng.randint(1, 30)))
            if text.strip() and "</think>" not in text:
                break
        think = ThinkBlock(text)
    texts = [
        "".join(rng.choice("abcdefgh") for _ in range(rng.randint(1, 6)))
        for _ in range(rng.randint(0, 4))
    ]
    audios = [rng.randrange(1000) for _ in range(rng.randint(0, 6))]
    chunking = ((1, 4), (2, 3), (1, 1), (3, 2))[rng.randrange(4)]
    return TepSequence(
        mode=mode,
        transcript=EnhancedTranscript(emotions=emotions, body=insert_tags(raw, events)),
        think=think,
        stream=interleave(texts, audios, chunking),
    )


def test_c05_sequence_protocol_round_trip():
    rng = random.Random(2005)
    with criterion("sequence protocol parse/render, 10000 fuzzed + fixture", 20.0):
        parsed = parse_enhanced(SERVANT)
        assert parsed.emotions == ("doubt", "contempt", "displeasure")
        assert parsed.body.raw == "Why did you choose such a servant?"
        assert parsed.body.events == (ParalinguisticEvent("Breathing", 12),)

        for i in range(10_000):
            seq = random_tep(rng, MODES[i % 4])
            assert parse_tep(render_tep(seq), seq.mode) == seq


def pipeline_settings(paths, journal_path, backend=None, **kw):
    gw = Gateway(
        backend=backend or MockChatBackend(paths["replies"]), templates=load_templates()
    )
    defaults = dict(
        novels=load_novels(paths["novels"]),
        gateway_generate=gw,
        gateway_predict=gw,
        gateway_judge=gw,
        journal_path=journal_path,
        seed=0,
        detector=ScriptedDetector(paths["detections"]),
        w=20,
    )
    defaults.update(kw)
    return PipelineSettings(**defaults)


class DyingMock(MockChatBackend):
    def __init__(self, replies_dir, die_on_call):
        super().__init__(replies_dir)
        self.die_on_call = die_on_call
        self.filter_calls = 0

    def send(self, messages, decode, key):
        if key[0] == "judge_filter":
            self.filter_calls += 1
            if self.filter_calls == self.die_on_call:
                raise RuntimeError("simulated crash")
        return super().send(messages, decode, key)


def test_c06_pipeline_determinism(tmp_path):
    with criterion("pipeline determinism on the 50-record corpus", 60.0):
        paths = mini_corpus.build(tmp_path, n=50)
        manifest = mini_corpus.make_manifest(50)

        runs = {}
        for name, workers in (("a", 1), ("b", 1), ("c", 8)):
            settings = pipeline_settings(paths, tmp_path / f"j_{name}.tsv", workers=workers)
            runs[name] = manifest_digest(run_pipeline(manifest, settings).manifest)
        assert runs["a"] == runs["b"] == runs["c"]

        # crash mid-way through the consistency filter, then resume
        journal = tmp_path / "j_kill.tsv"
        dying = DyingMock(paths["replies"], die_on_call=25)
        try:
            run_pipeline(manifest, pipeline_settings(paths, journal, backend=dying, workers=1))
            raise AssertionError("expected the simulated crash")
        except RuntimeError:
            pass
        resumed = run_pipeline(manifest, pipeline_settings(paths, journal, workers=1))
        assert manifest_digest(resumed.manifest) == runs["a"]


def test_c07_element_sampling_distribution():
    elements = ContextualElements(
        environment="a windswept pier",
        current_event="the ferry is late",
        speaker_personality="patient",
        interlocutor_state="restless",
        speaker_intent="to reassure",
    )
    with criterion("element sampling distribution, 10000 draws", 5.0):
        counts = Counter()
        for i in range(10_000):
            chosen = select_elements(elements, (2, 5), (0, "acceptance", i))
            counts[len(chosen)] += 1
        for k in (2, 3, 4, 5):
            assert abs(counts[k] / 10_000 - 0.25) <= 0.02, (k, counts[k])


def test_c08_judge_rank_aggregation():
    k = 6
    names = [f"s{i}" for i in range(k)]
    with criterion("judge rank aggregation, constant winner + 10000 groups", 10.0):
        fixed_ranking = {name: i + 1 for i, name in enumerate(names)}
        constant = [
            JudgeGroupResult(f"g{i:05d}", {n: 50 for n in names}, dict(fixed_ranking))
            for i in range(200)
        ]
        agg = aggregate_judge(constant)
        assert agg.mean_ranks["s0"] == 1.0
        assert format_rank(agg.mean_ranks["s0"], k) == "1.00/6"

        rng = random.Random(2008)
        uniform = []
        for i in range(10_000):
            perm = list(range(1, k + 1))
            rng.shuffle(perm)
            uniform.append(
                JudgeGroupResult(f"g{i:05d}", {n: 50 for n in names}, dict(zip(names, perm)))
            )
        agg = aggregate_judge(uniform)
        for name in names:
            assert abs(agg.mean_ranks[name] - (k + 1) / 2) <= 0.1, name


def bare_record(rid, novel):
    return EnrichedRecord(
        utterance=UtteranceRecord(
            id=rid,
            audio_ref=f"audio/{rid}.wav",
            transcript="a line",
            speaker_id="spk",
            emotion_labels=("calm",),
            acoustic_description="even",
            novel_id=novel,
        ),
        instructions=(Instruction("Read it.", ("environment",), (0, rid, 0)),),
    )


def test_c09_partition_purity():
    rng = random.Random(2009)
    meta = ManifestMeta(corpus="c", source_hours=1.0, pipeline_version="0", seed=0)
    with criterion("partition purity, 1000 random manifests", 10.0):
        for _ in range(1_000):
            novels = [f"n{j:02d}" for j in range(rng.randint(2, 6))]
            records = tuple(
                bare_record(f"r{i:03d}", rng.choice(novels)) for i in range(rng.randint(5, 40))
            )
            manifest = DatasetManifest(meta=meta, records=records)
            present = sorted(manifest.novels())
            held_out = set(rng.sample(present, rng.randint(1, len(present))))
            part = partition_dataset(manifest, held_out, 1)
            by_id = {r.id: r.novel_id for r in records}
            assert part.train_ids.isdisjoint(part.test_ids)
            assert part.train_ids | part.test_ids == set(by_id)
            train_novels = {by_id[rid] for rid in part.train_ids}
            test_novels = {by_id[rid] for rid in part.test_ids}
            assert train_novels.isdisjoint(held_out)
            assert test_novels <= held_out


GOLDEN_REFS = {"s1": "abcdefgh", "s2": "abcd"}
GOLDEN_SYS = {
    "sysa": {"s1": "abcdefgh", "s2": "abcd"},
    "sysb": {"s1": "abcdefgx", "s2": "abcx"},
}
GOLDEN_SCORE = {"sysa": 80, "sysb": 60}
GOLDEN_RANK = {"sysa": 1, "sysb": 2}
GOLDEN_EMBED = {
    "ref_s1.wav": [1.0, 0.0, 0.0, 0.0],
    "ref_s2.wav": [1.0, 0.0, 0.0, 0.0],
    "sysa_s1.wav": [2.0, 0.0, 0.0, 0.0],  # cosine 1.0 with the speaker mean
    "sysa_s2.wav": [1.0, 1.0, 1.0, 1.0],  # dot 1, norm 2 -> cosine 0.5 exactly
    "sysb_s1.wav": [0.0, 1.0, 0.0, 0.0],  # orthogonal -> 0.0
    "sysb_s2.wav": [0.0, 0.0, 2.0, 0.0],  # orthogonal -> 0.0
}


def test_c10_golden_evaluation_report(tmp_path):
    with criterion("golden evaluation report, two mock systems", 30.0):
        refs = [
            ReferenceSample(sid, text, "spk1", f"ref_{sid}.wav", f"Take {sid}.")
            for sid, text in GOLDEN_REFS.items()
        ]
        systems = {
            name: [
                SystemSample(name, sid, f"{name}_{sid}.wav", f"Take {sid}.", text)
                for sid, text in rows.items()
            ]
            for name, rows in GOLDEN_SYS.items()
        }
        asr = {
            f"{name}_{sid}.wav": text
            for name, rows in GOLDEN_SYS.items()
            for sid, text in rows.items()
        }
        (tmp_path / "asr.json").write_text(json.dumps(asr), encoding="utf-8")
        (tmp_path / "embed.json").write_text(json.dumps(GOLDEN_EMBED), encoding="utf-8")
        replies = tmp_path / "replies"
        for sid in GOLDEN_REFS:
            order = SeededStream("judge_shuffle", "0", sid).shuffle(sorted(GOLDEN_SYS))
            write_mock_reply(
                replies,
                "eval_judge",
                sid,
                0,
                json.dumps(
                    {
                        "scores": [GOLDEN_SCORE[n] for n in order],
                        "ranking": [GOLDEN_RANK[n] for n in order],
                    }
                ),
            )
        report = run_eval(
            systems,
            refs,
            ScriptedAsrBackend(tmp_path / "asr.json"),
            ScriptedEmbedBackend(tmp_path / "embed.json"),
            Gateway(backend=MockChatBackend(replies), templates=load_templates()),
            seed=0,
            config_echo={"seed": 0},
        )
        # every aggregate below is an exact binary fraction, so equality is
        # byte-for-byte after serialization, not approximate
        expected = EvalReport(
            systems=(
                SystemAggregate("sysa", 80.0, 1.0, 0.0, 0.75),
                SystemAggregate("sysb", 60.0, 2.0, fmean([1 / 8, 1 / 4]), 0.0),
            ),
            k=2,
            samples_judged=2,
            samples_cer=2,
            samples_sim=2,
            config={"seed": 0},
        )
        assert report == expected
        got_bytes = json.dumps(report_to_json(report), sort_keys=True).encode("utf-8")
        want_bytes = json.dumps(report_to_json(expected), sort_keys=True).encode("utf-8")
        assert got_bytes == want_bytes
