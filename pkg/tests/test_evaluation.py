"""Evaluation suite: normalization, CER, SIM, judging, reports."""

import json
from statistics import fmean

import numpy as np
import pytest

from instructspeech.errors import InputError
from instructspeech.evaluation import (
    EvalReport,
    InvalidPermutation,
    DimensionMismatch,
    JudgeGroupResult,
    ReferenceSample,
    ScriptMissing,
    SystemAggregate,
    SystemSample,
    ZeroVector,
    _anon_label,
    aggregate_judge,
    cer,
    eval_normalize,
    format_rank,
    judge_group,
    render_report,
    report_from_json,
    report_to_json,
    run_eval,
    sim,
)
from instructspeech.backends import ScriptedAsrBackend, ScriptedEmbedBackend
from instructspeech.gateway import (
    Gateway,
    MockChatBackend,
    MockReplyMissing,
    UnparseableAfterRepairs,
    load_templates,
    write_mock_reply,
)
from instructspeech.seeding import SeededStream
from instructspeech.tagging import EmptyReference

from .oracles import cosine, edit_distance


def test_eval_normalize_drops_tags_and_header():
    assert eval_normalize("[doubt, contempt] Why <|Breathing|> so?") == "why so?"


def test_eval_normalize_header_only_at_start():
    assert eval_normalize("see [brackets] inside") == "see [brackets] inside"


def test_eval_normalize_plain_text():
    assert eval_normalize("Hello,  World!") == "hello, world!"


def test_cer_fixtures():
    # single substitution over four reference chars
    assert cer("abcd", "abed") == 0.25
    # four insertions over a two-char reference: CER exceeds 1
    assert cer("ab", "abcdef") == 2.0
    assert cer("same line", "same line") == 0.0


def test_cer_ignores_markup_on_both_sides():
    assert cer("[sad] hello <|Sigh|> world", "hello world") == 0.0


def test_cer_folds_case_and_width():
    assert cer("Hello, World!", "hello,  world!") == 0.0


def test_cer_empty_reference():
    with pytest.raises(EmptyReference):
        cer("<|Breathing|> ", "something")


def test_cer_matches_oracle_on_random_pairs():
    import random

    rng = random.Random(404)
    alphabet = "abcd "
    for _ in range(200):
        ref = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 30)))
        hyp = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 30)))
        ref_n = eval_normalize(ref)
        if not ref_n:
            continue
        expected = edit_distance(ref_n, eval_normalize(hyp)) / len(ref_n)
        assert cer(ref, hyp) == expected


def test_sim_hand_computed():
    assert sim([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1.0 / np.sqrt(2.0))
    assert sim([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert sim([2.0, 1.0], [-2.0, -1.0]) == pytest.approx(-1.0)


def test_sim_self_is_one():
    v = [0.3, -0.2, 0.9, 1.7]
    assert sim(v, v) == 1.0


def test_sim_shape_errors():
    with pytest.raises(DimensionMismatch):
        sim([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(DimensionMismatch):
        sim([[1.0], [2.0]], [[1.0], [2.0]])


def test_sim_zero_vector():
    with pytest.raises(ZeroVector):
        sim([0.0, 0.0], [1.0, 0.0])


def test_anon_labels():
    assert _anon_label(0) == "System A"
    assert _anon_label(25) == "System Z"
    assert _anon_label(26) == "System 27"


class RecordingMock(MockChatBackend):
    def __init__(self, replies_dir):
        super().__init__(replies_dir)
        self.calls = []

    def send(self, messages, decode, key):
        self.calls.append((list(messages), key))
        return super().send(messages, decode, key)


def make_gateway(replies_dir):
    backend = RecordingMock(replies_dir)
    return Gateway(backend=backend, templates=load_templates()), backend


def group_of(names, sample_id="s1", instruction="Read it softly."):
    return [
        SystemSample(name, sample_id, f"a{i}.wav", instruction, f"line {i}")
        for i, name in enumerate(names)
    ]


def test_judge_group_unmasks_through_the_shuffle(tmp_path):
    samples = group_of(["alpha", "beta", "gamma"])
    shuffled = SeededStream("judge_shuffle", "0", "s1").shuffle(samples)
    reply = {"scores": [70, 80, 90], "ranking": [3, 2, 1]}
    write_mock_reply(tmp_path, "eval_judge", "s1", 0, json.dumps(reply))
    gw, backend = make_gateway(tmp_path)

    result = judge_group(samples, gw, seed=0)
    assert result.sample_id == "s1"
    assert result.scores == {s.system_name: reply["scores"][i] for i, s in enumerate(shuffled)}
    assert result.ranking == {s.system_name: reply["ranking"][i] for i, s in enumerate(shuffled)}
    assert judge_group(samples, gw, seed=0) == result

    prompt = backend.calls[0][0][-1]["content"]
    assert "Instruction: Read it softly." in prompt
    assert "System A:" in prompt and "System B:" in prompt and "System C:" in prompt
    for masked in ("alpha", "beta", "gamma"):
        assert masked not in prompt
    for i in range(3):
        assert f"a{i}.wav" in prompt and f"line {i}" in prompt


def test_judge_group_seed_changes_presentation(tmp_path):
    samples = group_of(["alpha", "beta", "gamma", "delta", "echo"])
    order0 = SeededStream("judge_shuffle", "0", "s1").shuffle(samples)
    order9 = SeededStream("judge_shuffle", "9", "s1").shuffle(samples)
    assert [s.system_name for s in order0] != [s.system_name for s in order9]


def test_judge_group_repairs_tied_ranking(tmp_path):
    samples = group_of(["alpha", "beta"])
    write_mock_reply(
        tmp_path, "eval_judge", "s1", 0, json.dumps({"scores": [50, 60], "ranking": [1, 1]})
    )
    write_mock_reply(
        tmp_path, "eval_judge", "s1", 1, json.dumps({"scores": [50, 60], "ranking": [2, 1]})
    )
    gw, backend = make_gateway(tmp_path)
    result = judge_group(samples, gw, seed=0)
    assert sorted(result.ranking.values()) == [1, 2]
    assert len(backend.calls) == 2
    repair = backend.calls[1][0][-1]["content"]
    assert "strict permutation" in repair


def test_judge_group_invalid_permutation_after_repairs(tmp_path):
    samples = group_of(["alpha", "beta"])
    for round_no in range(4):
        write_mock_reply(
            tmp_path,
            "eval_judge",
            "s1",
            round_no,
            json.dumps({"scores": [50, 60], "ranking": [2, 2]}),
        )
    gw, _ = make_gateway(tmp_path)
    with pytest.raises(InvalidPermutation) as info:
        judge_group(samples, gw, seed=0)
    assert info.value.rounds == 3
    assert json.loads(info.value.last_reply) == {"scores": [50, 60], "ranking": [2, 2]}


def test_judge_group_other_schema_failures_stay_unparseable(tmp_path):
    samples = group_of(["alpha", "beta"])
    for round_no in range(4):
        write_mock_reply(
            tmp_path,
            "eval_judge",
            "s1",
            round_no,
            json.dumps({"scores": [500, 60], "ranking": [2, 2]}),
        )
    gw, _ = make_gateway(tmp_path)
    with pytest.raises(UnparseableAfterRepairs):
        judge_group(samples, gw, seed=0)


def test_judge_group_input_validation(tmp_path):
    gw, _ = make_gateway(tmp_path)
    with pytest.raises(InputError):
        judge_group([], gw)
    with pytest.raises(InputError):
        judge_group(group_of(["alpha", "alpha"]), gw)
    mixed_ids = group_of(["alpha"]) + group_of(["beta"], sample_id="s2")
    with pytest.raises(InputError):
        judge_group(mixed_ids, gw)
    mixed_instr = group_of(["alpha"]) + group_of(["beta"], instruction="Shout.")
    with pytest.raises(InputError):
        judge_group(mixed_instr, gw)


def test_format_rank():
    assert format_rank(2.9444, 6) == "2.94/6"
    assert format_rank(1.0, 4) == "1.00/4"


def test_aggregate_judge_means():
    results = [
        JudgeGroupResult("s1", {"a": 80, "b": 60}, {"a": 1, "b": 2}),
        JudgeGroupResult("s2", {"a": 70, "b": 90}, {"a": 2, "b": 1}),
    ]
    agg = aggregate_judge(results)
    assert agg.k == 2 and agg.n == 2
    assert agg.mean_scores == {"a": 75.0, "b": 75.0}
    assert agg.mean_ranks == {"a": 1.5, "b": 1.5}


def test_aggregate_judge_rejects_mismatched_systems():
    results = [
        JudgeGroupResult("s1", {"a": 80, "b": 60}, {"a": 1, "b": 2}),
        JudgeGroupResult("s2", {"a": 70, "c": 90}, {"a": 2, "c": 1}),
    ]
    with pytest.raises(InputError):
        aggregate_judge(results)
    with pytest.raises(InputError):
        aggregate_judge([])


NAMES = ["sysa", "sysb", "GroundTruth"]
SCORE = {"sysa": 80, "sysb": 60, "GroundTruth": 95}
RANK = {"sysa": 2, "sysb": 3, "GroundTruth": 1}
REF_TEXT = {"s1": "the red fox ran", "s2": "a quiet morning came", "s3": "the long road home"}
SPEAKER = {"s1": "spk1", "s2": "spk2", "s3": "spk1"}
SYS_TEXT = {
    "sysa": dict(REF_TEXT),
    "GroundTruth": dict(REF_TEXT),
    "sysb": {
        "s1": "the red fix ran",
        "s2": "a quiet mornings came",
        "s3": "the wrong road home",
    },
}
REF_EMBED = {
    "ref_s1.wav": [1.0, 0.0, 0.0],
    "ref_s2.wav": [0.0, 1.0, 1.0],
    "ref_s3.wav": [1.0, 1.0, 0.0],
}
SYS_EMBED = {
    "sysa_s1.wav": [0.9, 0.1, 0.0],
    "sysa_s2.wav": [0.1, 0.9, 0.8],
    "sysa_s3.wav": [0.8, 0.9, 0.1],
    "sysb_s1.wav": [0.2, 0.9, 0.3],
    "sysb_s2.wav": [0.9, 0.2, 0.1],
    "sysb_s3.wav": [0.1, 0.2, 0.9],
}


def build_env(
    root,
    *,
    asr_overrides=None,
    embed_overrides=None,
    judge_bad=(),
    judge_missing=(),
    extra_ref=False,
):
    sids = ["s1", "s2", "s3"]
    refs = [
        ReferenceSample(sid, REF_TEXT[sid], SPEAKER[sid], f"ref_{sid}.wav", f"Take {sid}.")
        for sid in sids
    ]
    if extra_ref:
        refs.append(ReferenceSample("s4", "unpaired line", "spk1", "ref_s4.wav", "Take s4."))
    systems = {
        name: [
            SystemSample(name, sid, f"{name}_{sid}.wav", f"Take {sid}.", SYS_TEXT[name][sid])
            for sid in sids
        ]
        for name in NAMES
    }
    if extra_ref:
        systems["sysa"] = systems["sysa"] + [
            SystemSample("sysa", "s4", "sysa_s4.wav", "Take s4.", "unpaired line")
        ]

    asr_table = {f"{name}_{sid}.wav": SYS_TEXT[name][sid] for name in NAMES for sid in sids}
    asr_table.update(asr_overrides or {})
    (root / "asr.json").write_text(json.dumps(asr_table), encoding="utf-8")

    embed_table = dict(REF_EMBED) | dict(SYS_EMBED)
    embed_table.update(embed_overrides or {})
    (root / "embed.json").write_text(json.dumps(embed_table), encoding="utf-8")

    replies = root / "replies"
    replies.mkdir(exist_ok=True)
    for sid in sids:
        if sid in judge_missing:
            continue
        group = [
            SystemSample(name, sid, f"{name}_{sid}.wav", f"Take {sid}.", SYS_TEXT[name][sid])
            for name in NAMES
        ]
        shuffled = SeededStream("judge_shuffle", "0", sid).shuffle(group)
        if sid in judge_bad:
            reply = {"scores": [50] * 3, "ranking": [1, 1, 1]}
            for round_no in range(4):
                write_mock_reply(replies, "eval_judge", sid, round_no, json.dumps(reply))
        else:
            reply = {
                "scores": [SCORE[s.system_name] for s in shuffled],
                "ranking": [RANK[s.system_name] for s in shuffled],
            }
            write_mock_reply(replies, "eval_judge", sid, 0, json.dumps(reply))

    gw = Gateway(backend=MockChatBackend(replies), templates=load_templates())
    return {
        "systems": systems,
        "refs": refs,
        "asr": ScriptedAsrBackend(root / "asr.json"),
        "embed": ScriptedEmbedBackend(root / "embed.json"),
        "gateway": gw,
        "asr_table": asr_table,
    }


def speaker_means():
    return {
        "spk1": list(np.mean([REF_EMBED["ref_s1.wav"], REF_EMBED["ref_s3.wav"]], axis=0)),
        "spk2": REF_EMBED["ref_s2.wav"],
    }


def expected_cer(name, sids=("s1", "s2", "s3")):
    return fmean(cer(REF_TEXT[sid], SYS_TEXT[name][sid]) for sid in sids)


def expected_sim(name, sids=("s1", "s2", "s3")):
    means = speaker_means()
    return fmean(cosine(SYS_EMBED[f"{name}_{sid}.wav"], means[SPEAKER[sid]]) for sid in sids)


def by_name(report):
    return {agg.system: agg for agg in report.systems}


def test_run_eval_clean(tmp_path):
    env = build_env(tmp_path)
    report = run_eval(
        env["systems"], env["refs"], env["asr"], env["embed"], env["gateway"],
        seed=0, config_echo={"seed": 0},
    )
    assert report.k == 3
    assert report.samples_judged == 3
    assert report.samples_cer == 3
    assert report.samples_sim == 3
    assert report.config == {"seed": 0}
    aggs = by_name(report)
    for name in NAMES:
        assert aggs[name].mean_score == pytest.approx(float(SCORE[name]))
        assert aggs[name].mean_rank == pytest.approx(float(RANK[name]))
        assert aggs[name].cer == pytest.approx(expected_cer(name), abs=1e-12)
    assert aggs["sysa"].sim == pytest.approx(expected_sim("sysa"), abs=1e-12)
    assert aggs["sysb"].sim == pytest.approx(expected_sim("sysb"), abs=1e-12)
    assert aggs["GroundTruth"].sim is None
    assert aggs["sysa"].cer == 0.0
    assert aggs["sysb"].cer > 0.0


def test_run_eval_restricts_to_shared_samples(tmp_path):
    env = build_env(tmp_path, extra_ref=True)
    report = run_eval(
        env["systems"], env["refs"], env["asr"], env["embed"], env["gateway"], seed=0
    )
    assert report.samples_judged == 3
    assert report.samples_cer == 3


def test_run_eval_cer_failure_excludes_sample_for_all_systems(tmp_path):
    env = build_env(tmp_path, asr_overrides={"sysb_s2.wav": 123})
    report = run_eval(
        env["systems"], env["refs"], env["asr"], env["embed"], env["gateway"], seed=0
    )
    aggs = by_name(report)
    assert report.samples_cer == 2
    assert report.samples_judged == 3 and report.samples_sim == 3
    assert aggs["sysa"].cer == pytest.approx(expected_cer("sysa", ("s1", "s3")), abs=1e-12)
    assert aggs["sysb"].cer == pytest.approx(expected_cer("sysb", ("s1", "s3")), abs=1e-12)


def test_run_eval_sim_failure_excludes_sample_for_all_systems(tmp_path):
    env = build_env(tmp_path, embed_overrides={"sysb_s3.wav": "oops"})
    report = run_eval(
        env["systems"], env["refs"], env["asr"], env["embed"], env["gateway"], seed=0
    )
    aggs = by_name(report)
    assert report.samples_sim == 2
    assert report.samples_cer == 3
    assert aggs["sysa"].sim == pytest.approx(expected_sim("sysa", ("s1", "s2")), abs=1e-12)


def test_run_eval_bad_reference_embedding_drops_speaker_samples(tmp_path):
    env = build_env(tmp_path, embed_overrides={"ref_s2.wav": "oops"})
    report = run_eval(
        env["systems"], env["refs"], env["asr"], env["embed"], env["gateway"], seed=0
    )
    assert report.samples_sim == 2  # only spk1 samples remain
    aggs = by_name(report)
    assert aggs["sysb"].sim == pytest.approx(expected_sim("sysb", ("s1", "s3")), abs=1e-12)


def test_run_eval_judge_failure_excludes_sample(tmp_path):
    env = build_env(tmp_path, judge_bad={"s2"})
    report = run_eval(
        env["systems"], env["refs"], env["asr"], env["embed"], env["gateway"], seed=0
    )
    assert report.samples_judged == 2
    aggs = by_name(report)
    assert aggs["sysa"].mean_rank == pytest.approx(float(RANK["sysa"]))
    assert report.samples_cer == 3


def test_run_eval_missing_mock_reply_is_fatal(tmp_path):
    env = build_env(tmp_path, judge_missing={"s3"})
    with pytest.raises(MockReplyMissing):
        run_eval(env["systems"], env["refs"], env["asr"], env["embed"], env["gateway"], seed=0)


def test_run_eval_missing_script_entry_is_fatal(tmp_path):
    env = build_env(tmp_path)
    (tmp_path / "asr.json").write_text(json.dumps({"x": "y"}), encoding="utf-8")
    sparse = ScriptedAsrBackend(tmp_path / "asr.json")
    with pytest.raises(ScriptMissing):
        run_eval(env["systems"], env["refs"], sparse, env["embed"], env["gateway"], seed=0)


def test_run_eval_requires_shared_samples(tmp_path):
    env = build_env(tmp_path)
    refs = [ReferenceSample("zz", "no pair", "spk1", "ref_zz.wav", "Take zz.")]
    with pytest.raises(InputError):
        run_eval(env["systems"], refs, env["asr"], env["embed"], env["gateway"], seed=0)


REPORT = EvalReport(
    systems=(
        SystemAggregate("alpha", 81.5, 1.25, 0.035, 0.8123),
        SystemAggregate("beta", 60.0, 1.75, 0.1295, None),
    ),
    k=2,
    samples_judged=4,
    samples_cer=4,
    samples_sim=4,
    config={"seed": 7},
)


def test_render_report_table_golden():
    expected = "\n".join(
        [
            "System  Score   Rank     CER(%)  SIM",
            "------  ------  -------  ------  -------",
            "alpha   81.50*  1.25/2*  3.50*   0.8123*",
            "beta    60.00   1.75/2   12.95   -",
            "samples: judged=4 cer=4 sim=4; K=2; config: seed=7",
        ]
    )
    assert render_report(REPORT) == expected + "\n"


def test_render_report_csv_golden():
    expected = (
        "System,Score,Rank,CER(%),SIM\n"
        "alpha,81.50,1.25/2,3.50,0.8123\n"
        "beta,60.00,1.75/2,12.95,-\n"
    )
    assert render_report(REPORT, fmt="csv") == expected


def test_render_report_unknown_format():
    with pytest.raises(InputError):
        render_report(REPORT, fmt="html")


def test_render_report_all_missing_metrics():
    report = EvalReport(
        systems=(SystemAggregate("solo", None, None, None, None),),
        k=1, samples_judged=0, samples_cer=0, samples_sim=0,
    )
    out = render_report(report)
    assert "solo    -      -     -       -" in out
    assert "samples: judged=0 cer=0 sim=0; K=1" in out


def test_report_json_round_trip():
    restored = report_from_json(json.loads(json.dumps(report_to_json(REPORT))))
    assert restored == REPORT


def test_report_from_json_malformed():
    with pytest.raises(InputError):
        report_from_json({"systems": [{"system": "x"}]})
    with pytest.raises(InputError):
        report_from_json({"k": 2})
