"""Operator entry point: one subcommand per pipeline stage plus metrics,
partition, eval, and report.

Conventions shared by every subcommand: progress and diagnostics go to
standard error, standard output ends with exactly one JSON summary object,
and a snapshot of the effective configuration lands next to the outputs.
Exit codes: 0 success, 2 validation failure, 3 backend exhaustion.
`--dry-run` prints the work plan and touches nothing.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from dataclasses import replace
from pathlib import Path
from typing import Any

from . import __version__
from .align import load_novels
from .backends import (
    HttpAsrBackend,
    HttpDetector,
    HttpEmbedBackend,
    HttpTagger,
    ScriptedAsrBackend,
    ScriptedDetector,
    ScriptedEmbedBackend,
    ScriptedTagger,
)
from .config import RunConfig, apply_overrides, load_config, snapshot
from .errors import BackendError, InputError, ToolkitError
from .evaluation import (
    ReferenceSample,
    SystemSample,
    render_report,
    report_from_json,
    report_to_json,
    run_eval,
)
from .gateway import (
    DEFAULT_RETRIES,
    DecodeParams,
    Gateway,
    HttpChatBackend,
    MockChatBackend,
    RateLimiter,
    load_templates,
)
from .manifest_io import manifest_digest, read_manifest, write_manifest
from .pipeline import STAGES, Journal, PipelineSettings, run_pipeline, write_discard_log
from .records import DatasetManifest, partition_dataset
from .tagging import TaggerItem, evaluate_tagger

log = logging.getLogger(__name__)

_OVERRIDE_KEYS = (
    "seed",
    "workers",
    "w",
    "tolerance",
    "unit_kind",
    "novels_dir",
    "manifest_in",
    "manifest_out",
    "journal",
    "mock_dir",
    "out_dir",
)

SNAPSHOT_NAME = "effective_config.json"


def _emit(summary: dict[str, Any]) -> None:
    print(json.dumps(summary, ensure_ascii=False, sort_keys=True))


def _write_snapshot(cfg: RunConfig, command: str, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / SNAPSHOT_NAME
    body = json.dumps(snapshot(cfg, command, __version__), indent=2, sort_keys=True, ensure_ascii=False)
    path.write_text(body + "\n", encoding="utf-8")
    return path


def _require_paths(cfg: RunConfig, keys: tuple[str, ...], command: str) -> None:
    missing = [key for key in keys if getattr(cfg, key) is None]
    if missing:
        raise InputError(
            f"{command} requires paths.{', paths.'.join(missing)} (config file or flag)"
        )


class _UnconfiguredChat:
    """Stands in for chat roles the requested stage range never calls."""

    def __init__(self, role: str):
        self.role = role

    def send(self, messages: list[dict[str, str]], decode: DecodeParams, key) -> str:
        raise InputError(f"backends.{self.role}: required but not configured")


def _chat_gateway(cfg: RunConfig, role: str, templates, configured: bool = True) -> Gateway:
    if not configured:
        return Gateway(backend=_UnconfiguredChat(role), templates=templates)
    block = dict(cfg.backends.get(role, {}))
    kind = block.pop("kind", "mock")
    rps = block.pop("rps", None)
    retries = int(block.pop("retries", DEFAULT_RETRIES))
    if kind == "mock":
        mock_dir = block.pop("mock_dir", None) or (str(cfg.mock_dir) if cfg.mock_dir else None)
        if not mock_dir:
            raise InputError(
                f"backends.{role}: mock chat backend needs backends.{role}.mock_dir"
                f" or paths.mock_dir"
            )
        if not Path(mock_dir).is_dir():
            raise InputError(f"backends.{role}: mock directory not found: {mock_dir}")
        backend: Any = MockChatBackend(mock_dir)
    elif kind == "http":
        url = block.pop("url", None)
        model = block.pop("model", None)
        if not url or not model:
            raise InputError(f"backends.{role}: http chat backend needs url and model")
        backend = HttpChatBackend(
            url,
            model,
            api_key_env=str(block.pop("api_key_env", "LLM_API_KEY")),
            timeout=float(block.pop("timeout", 60.0)),
        )
    else:
        raise InputError(f"backends.{role}: unknown kind {kind!r} (expected mock or http)")
    if block:
        raise InputError(f"backends.{role}: unknown keys {sorted(block)}")
    limiter = RateLimiter(None if rps is None else float(rps))
    return Gateway(backend=backend, templates=templates, limiter=limiter, retries=retries)


_SCRIPTED_AUDIO = {
    "asr": ScriptedAsrBackend,
    "embed": ScriptedEmbedBackend,
    "detect": ScriptedDetector,
}
_HTTP_AUDIO = {"asr": HttpAsrBackend, "embed": HttpEmbedBackend, "detect": HttpDetector}


def _audio_backend(cfg: RunConfig, role: str, strategy: str | None = None) -> Any:
    block = dict(cfg.backends.get(role, {}))
    kind = block.pop("kind", "scripted")
    block.pop("strategy", None)  # the flag decides the strategy, not the block
    if kind == "scripted":
        script = block.pop("script", None)
        if not script:
            raise InputError(f"backends.{role}: scripted backend needs a script file path")
        if role == "tag":
            backend: Any = ScriptedTagger(script, strategy or "PASR")
        else:
            backend = _SCRIPTED_AUDIO[role](script)
    elif kind == "http":
        url = block.pop("url", None)
        if not url:
            raise InputError(f"backends.{role}: http backend needs url")
        timeout = float(block.pop("timeout", 30.0))
        if role == "tag":
            backend = HttpTagger(url, strategy or "PASR", timeout=timeout)
        else:
            backend = _HTTP_AUDIO[role](url, timeout=timeout)
    else:
        raise InputError(f"backends.{role}: unknown kind {kind!r} (expected scripted or http)")
    if block:
        raise InputError(f"backends.{role}: unknown keys {sorted(block)}")
    return backend


class _Progress:
    def __init__(self, total: int):
        self.total = total
        self.counts = {"kept": 0, "discarded": 0, "failed": 0}
        self._lock = threading.Lock()

    def __call__(self, record_id: str, kind: str) -> None:
        with self._lock:
            self.counts[kind] += 1
            done = sum(self.counts.values())
            print(
                f"progress: {done}/{self.total} records"
                f" (kept={self.counts['kept']}"
                f" discarded={self.counts['discarded']}"
                f" failed={self.counts['failed']})",
                file=sys.stderr,
            )


def _stage_plan(journal: Path, stage: str, record_ids: list[str]) -> dict[str, dict[str, int]]:
    status = Journal.peek(journal)
    plan: dict[str, dict[str, int]] = {}
    for s in STAGES[: STAGES.index(stage) + 1]:
        done = sum(1 for rid in record_ids if status.get((rid, s)) == "done")
        failed = sum(1 for rid in record_ids if status.get((rid, s)) == "failed")
        plan[s] = {"done": done, "failed": failed, "pending": len(record_ids) - done - failed}
    return plan


def _print_stage_counters(plan: dict[str, dict[str, int]]) -> None:
    for stage, counts in plan.items():
        print(
            f"{stage}: done={counts['done']} failed={counts['failed']}"
            f" pending={counts['pending']}",
            file=sys.stderr,
        )


def _record_unit_kind(manifest: DatasetManifest, cfg: RunConfig, novels) -> DatasetManifest:
    if manifest.meta.unit_kind is not None:
        return manifest
    kinds = {n.unit_kind for n in novels.values()}
    effective = cfg.unit_kind or (next(iter(kinds)) if len(kinds) == 1 else None)
    if effective is None:
        return manifest
    return DatasetManifest(meta=replace(manifest.meta, unit_kind=effective), records=manifest.records)


def _cmd_stage(cfg: RunConfig, args: argparse.Namespace, stage: str) -> int:
    _require_paths(cfg, ("novels_dir", "manifest_in", "manifest_out", "journal"), stage)
    if not cfg.novels_dir.is_dir():
        raise InputError(f"novels directory not found: {cfg.novels_dir}")
    if not cfg.manifest_in.is_file():
        raise InputError(f"input manifest not found: {cfg.manifest_in}")
    manifest = read_manifest(cfg.manifest_in)
    record_ids = [r.id for r in manifest.records]
    discard_path = cfg.manifest_out.with_name(cfg.manifest_out.stem + ".discards.jsonl")
    would_write = [
        str(cfg.manifest_out),
        str(discard_path),
        str(cfg.manifest_out.parent / SNAPSHOT_NAME),
    ]
    if args.dry_run:
        _emit(
            {
                "command": stage,
                "dry_run": True,
                "records": len(record_ids),
                "plan": _stage_plan(cfg.journal, stage, record_ids),
                "would_write": would_write,
            }
        )
        return 0

    novels = load_novels(cfg.novels_dir, cfg.unit_kind)
    limit = STAGES.index(stage)
    templates = load_templates()
    settings = PipelineSettings(
        novels=novels,
        gateway_generate=_chat_gateway(
            cfg, "generate", templates, configured=limit >= STAGES.index("distill")
        ),
        gateway_predict=_chat_gateway(
            cfg, "predict", templates, configured=limit >= STAGES.index("filter")
        ),
        gateway_judge=_chat_gateway(
            cfg, "judge", templates, configured=limit >= STAGES.index("filter")
        ),
        journal_path=cfg.journal,
        seed=cfg.seed,
        detector=_audio_backend(cfg, "detect") if limit >= STAGES.index("tag") else None,
        w=cfg.w,
        k_range=cfg.k_range,
        instructions_per_record=cfg.instructions_per_record,
        emotion_threshold=cfg.emotion_threshold,
        acoustic_threshold=cfg.acoustic_threshold,
        theta=cfg.theta,
        epsilon=cfg.epsilon,
        workers=cfg.workers,
        until_stage=stage,
        progress=_Progress(len(record_ids)),
    )
    result = run_pipeline(manifest, settings)
    out_manifest = _record_unit_kind(result.manifest, cfg, novels)
    cfg.manifest_out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out_manifest, cfg.manifest_out)
    write_discard_log(result, discard_path)
    _write_snapshot(cfg, stage, cfg.manifest_out.parent)
    _print_stage_counters(_stage_plan(cfg.journal, stage, record_ids))
    _emit(
        {
            "command": stage,
            "records": len(record_ids),
            "kept": result.kept,
            "discarded": len(result.discarded),
            "failed": len(result.failed),
            "manifest": str(cfg.manifest_out),
            "digest": manifest_digest(out_manifest),
            "discard_log": str(discard_path),
        }
    )
    return 0


def _cmd_metrics(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require_paths(cfg, ("manifest_in",), "metrics")
    if not cfg.manifest_in.is_file():
        raise InputError(f"input manifest not found: {cfg.manifest_in}")
    manifest = read_manifest(cfg.manifest_in)
    items = [
        TaggerItem(r.id, r.utterance.audio_ref, r.tagged)
        for r in manifest.records
        if r.tagged is not None
    ]
    skipped = len(manifest.records) - len(items)
    if not items:
        raise InputError("no records in the manifest carry tagged references")
    out_dir = cfg.out_dir or cfg.manifest_in.parent
    report_path = out_dir / "tagger_report.json"
    if args.dry_run:
        _emit(
            {
                "command": "metrics",
                "dry_run": True,
                "strategy": args.strategy,
                "samples": len(items),
                "skipped": skipped,
                "would_write": [str(report_path), str(out_dir / SNAPSHOT_NAME)],
            }
        )
        return 0
    if skipped:
        print(f"metrics: skipping {skipped} records without tagged references", file=sys.stderr)
    role = "detect" if args.strategy == "PC-PTI" else "tag"
    backend = _audio_backend(cfg, role, strategy=None if role == "detect" else args.strategy)
    report = evaluate_tagger(backend, items, tolerance=cfg.tolerance)
    print(
        f"metrics: scored={len(report.samples) - report.failures}"
        f" failed={report.failures} of {len(items)} samples",
        file=sys.stderr,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "strategy": report.strategy,
        "tolerance": report.tolerance,
        "aggregates": report.aggregates,
        "failures": report.failures,
        "samples": [
            {
                "sample_id": s.sample_id,
                "c_f1": s.c_f1,
                "p_f1": s.p_f1,
                "aps": s.aps,
                "s_cer": s.s_cer,
                "error": s.error,
            }
            for s in report.samples
        ],
    }
    report_path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    _write_snapshot(cfg, "metrics", out_dir)
    _emit(
        {
            "command": "metrics",
            "strategy": report.strategy,
            "tolerance": report.tolerance,
            "samples": len(items),
            "failures": report.failures,
            "aggregates": report.aggregates,
            "report": str(report_path),
        }
    )
    return 0


def _cmd_partition(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require_paths(cfg, ("manifest_in",), "partition")
    if not cfg.manifest_in.is_file():
        raise InputError(f"input manifest not found: {cfg.manifest_in}")
    if args.held_out:
        held_out = tuple(name for name in args.held_out.split(",") if name)
    elif cfg.partition is not None:
        held_out = cfg.partition.held_out_novels
    else:
        held_out = ()
    if not held_out:
        raise InputError(
            "partition requires held-out novels (partition.held_out_novels or --held-out)"
        )
    manifest = read_manifest(cfg.manifest_in)
    out_dir = cfg.out_dir or cfg.manifest_in.parent
    out_path = out_dir / "partition.json"
    if args.dry_run:
        _emit(
            {
                "command": "partition",
                "dry_run": True,
                "records": len(manifest.records),
                "held_out_novels": sorted(held_out),
                "would_write": [str(out_path), str(out_dir / SNAPSHOT_NAME)],
            }
        )
        return 0
    part = partition_dataset(manifest, set(held_out), cfg.instructions_per_record)
    print(
        f"partition: train={len(part.train_ids)} test={len(part.test_ids)}"
        f" flagged={len(part.flagged_train_ids)}",
        file=sys.stderr,
    )
    payload = {
        "held_out_novels": sorted(part.held_out_novels),
        "train_ids": sorted(part.train_ids),
        "test_ids": sorted(part.test_ids),
        "flagged_train_ids": list(part.flagged_train_ids),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    _write_snapshot(cfg, "partition", out_dir)
    _emit(
        {
            "command": "partition",
            "train": len(part.train_ids),
            "test": len(part.test_ids),
            "flagged": len(part.flagged_train_ids),
            "held_out_novels": sorted(part.held_out_novels),
            "partition": str(out_path),
        }
    )
    return 0


def _read_jsonl(path: Path, where: str) -> list[dict[str, Any]]:
    if not path.is_file():
        raise InputError(f"{where}: file not found: {path}")
    rows: list[dict[str, Any]] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"{where}:{line_no}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise InputError(f"{where}:{line_no}: expected a JSON object")
        rows.append(obj)
    return rows


def _field(row: dict[str, Any], key: str, where: str, allow_empty: bool = False) -> str:
    value = row.get(key)
    if not isinstance(value, str) or (not allow_empty and not value):
        raise InputError(f"{where}: field {key!r} must be a non-empty string")
    return value


def _cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.eval is None:
        raise InputError("eval requires an eval block in the config")
    references = [
        ReferenceSample(
            sample_id=_field(row, "sample_id", f"references:{i}"),
            transcript=_field(row, "transcript", f"references:{i}", allow_empty=True),
            speaker_id=_field(row, "speaker_id", f"references:{i}"),
            audio_ref=_field(row, "audio_ref", f"references:{i}"),
            instruction=_field(row, "instruction", f"references:{i}", allow_empty=True),
        )
        for i, row in enumerate(_read_jsonl(cfg.eval.references, "references"), start=1)
    ]
    systems: dict[str, list[SystemSample]] = {}
    for name in sorted(cfg.eval.systems):
        path = cfg.eval.systems[name]
        systems[name] = [
            SystemSample(
                system_name=name,
                sample_id=_field(row, "sample_id", f"{name}:{i}"),
                audio_ref=_field(row, "audio_ref", f"{name}:{i}"),
                instruction=str(row.get("instruction", "")),
                transcript=_field(row, "transcript", f"{name}:{i}", allow_empty=True),
            )
            for i, row in enumerate(_read_jsonl(path, f"system {name}"), start=1)
        ]
    out_dir = cfg.out_dir or cfg.eval.references.parent
    paths = {ext: out_dir / f"eval_report.{ext}" for ext in ("json", "txt", "csv")}
    if args.dry_run:
        _emit(
            {
                "command": "eval",
                "dry_run": True,
                "systems": sorted(systems),
                "references": len(references),
                "would_write": [str(p) for p in paths.values()] + [str(out_dir / SNAPSHOT_NAME)],
            }
        )
        return 0
    templates = load_templates()
    report = run_eval(
        systems,
        references,
        asr_backend=_audio_backend(cfg, "asr"),
        embed_backend=_audio_backend(cfg, "embed"),
        judge_gateway=_chat_gateway(cfg, "judge", templates),
        seed=cfg.seed,
        ground_truth_system=cfg.eval.ground_truth,
        config_echo={"seed": cfg.seed},
    )
    print(
        f"eval: systems={report.k} judged={report.samples_judged}"
        f" cer={report.samples_cer} sim={report.samples_sim}",
        file=sys.stderr,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    paths["json"].write_text(
        json.dumps(report_to_json(report), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    paths["txt"].write_text(render_report(report, "table"), encoding="utf-8")
    paths["csv"].write_text(render_report(report, "csv"), encoding="utf-8")
    _write_snapshot(cfg, "eval", out_dir)
    _emit(
        {
            "command": "eval",
            "systems": report.k,
            "samples_judged": report.samples_judged,
            "samples_cer": report.samples_cer,
            "samples_sim": report.samples_sim,
            "report_json": str(paths["json"]),
            "report_txt": str(paths["txt"]),
            "report_csv": str(paths["csv"]),
        }
    )
    return 0


def _cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.report_json:
        path = Path(args.report_json)
    elif cfg.out_dir is not None:
        path = cfg.out_dir / "eval_report.json"
    else:
        raise InputError("report requires --report-json or paths.out_dir")
    if not path.is_file():
        raise InputError(f"report file not found: {path}")
    if args.dry_run:
        _emit({"command": "report", "dry_run": True, "source": str(path), "would_write": []})
        return 0
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"report file {path} is not valid JSON: {exc}") from exc
    report = report_from_json(data)
    sys.stdout.write(render_report(report, args.format))
    _emit(
        {
            "command": "report",
            "format": args.format,
            "systems": report.k,
            "source": str(path),
        }
    )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="instructspeech",
        description="Build and score open-vocabulary speech-instruction datasets.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", metavar="FILE", help="YAML run configuration")
    common.add_argument(
        "--dry-run", action="store_true", help="print the work plan without side effects"
    )
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging on stderr")
    common.add_argument("--seed", type=int, help="global random seed")
    common.add_argument("--workers", type=int, help="bound for every worker pool")
    common.add_argument("--w", type=int, help="context window size in units")
    common.add_argument("--tolerance", type=int, help="position tolerance for tag metrics")
    common.add_argument("--unit-kind", dest="unit_kind", choices=["word", "char"])
    for key in ("novels_dir", "manifest_in", "manifest_out", "journal", "mock_dir", "out_dir"):
        common.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="PATH")

    for stage in STAGES:
        p = sub.add_parser(
            stage, parents=[common], help=f"run the pipeline through the {stage} stage"
        )
        p.set_defaults(handler=lambda cfg, args, stage=stage: _cmd_stage(cfg, args, stage))

    p = sub.add_parser(
        "metrics", parents=[common], help="score a tagger backend against tagged references"
    )
    p.add_argument("--strategy", choices=["PC-PTI", "PASR", "PRI"], default="PC-PTI")
    p.set_defaults(handler=_cmd_metrics)

    p = sub.add_parser("partition", parents=[common], help="split a manifest by held-out novels")
    p.add_argument("--held-out", dest="held_out", metavar="IDS", help="comma-separated novel ids")
    p.set_defaults(handler=_cmd_partition)

    p = sub.add_parser("eval", parents=[common], help="run the evaluation suite on system outputs")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("report", parents=[common], help="render a saved evaluation report")
    p.add_argument("--report-json", dest="report_json", metavar="FILE")
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.set_defaults(handler=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, {key: getattr(args, key, None) for key in _OVERRIDE_KEYS})
        return args.handler(cfg, args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
