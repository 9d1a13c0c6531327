"""Run configuration: one YAML file, flag overrides on top, checked invariants.

Relative paths in the file resolve against the file's own directory, so a
config can travel with its corpus.  Overrides come from command-line flags
and resolve against the working directory.  API keys never appear here;
backend blocks name an environment variable instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import InputError

BACKEND_ROLES = ("generate", "predict", "judge", "asr", "embed", "detect", "tag")

_PATH_KEYS = ("novels_dir", "manifest_in", "manifest_out", "journal", "mock_dir", "out_dir")


@dataclass(frozen=True)
class EvalConfig:
    references: Path
    systems: dict[str, Path]
    ground_truth: str = "GroundTruth"


@dataclass(frozen=True)
class PartitionConfig:
    held_out_novels: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    novels_dir: Path | None = None
    manifest_in: Path | None = None
    manifest_out: Path | None = None
    journal: Path | None = None
    mock_dir: Path | None = None
    out_dir: Path | None = None
    seed: int = 0
    w: int = 1000
    k_range: tuple[int, int] = (2, 5)
    emotion_threshold: int = 6
    acoustic_threshold: int = 5
    instructions_per_record: int = 3
    tolerance: int = 5
    theta: float = 0.8
    epsilon: float = 0.02
    workers: int = 1
    unit_kind: str | None = None
    backends: dict[str, dict[str, Any]] = field(default_factory=dict)
    eval: EvalConfig | None = None
    partition: PartitionConfig | None = None


def validate_config(cfg: RunConfig) -> None:
    """Raise InputError listing every violated invariant."""
    problems: list[str] = []
    for name, value in (
        ("thresholds.emotion", cfg.emotion_threshold),
        ("thresholds.acoustic", cfg.acoustic_threshold),
    ):
        if not isinstance(value, int) or not 0 <= value <= 10:
            problems.append(f"{name}: must be an integer in 0..10, got {value!r}")
    lo, hi = cfg.k_range
    if not (isinstance(lo, int) and isinstance(hi, int) and 2 <= lo <= hi <= 5):
        problems.append(f"k_range: must satisfy 2 <= lo <= hi <= 5, got {cfg.k_range!r}")
    if not isinstance(cfg.w, int) or cfg.w < 0:
        problems.append(f"w: must be a non-negative integer, got {cfg.w!r}")
    if not isinstance(cfg.workers, int) or cfg.workers < 1:
        problems.append(f"workers: must be a positive integer, got {cfg.workers!r}")
    if not isinstance(cfg.instructions_per_record, int) or cfg.instructions_per_record < 1:
        problems.append(
            f"instructions_per_record: must be a positive integer,"
            f" got {cfg.instructions_per_record!r}"
        )
    if not isinstance(cfg.tolerance, int) or cfg.tolerance < 0:
        problems.append(f"tolerance: must be a non-negative integer, got {cfg.tolerance!r}")
    if not 0.0 < cfg.theta <= 1.0:
        problems.append(f"theta: must be in (0, 1], got {cfg.theta!r}")
    if cfg.epsilon < 0.0:
        problems.append(f"epsilon: must be >= 0, got {cfg.epsilon!r}")
    if cfg.unit_kind not in (None, "word", "char"):
        problems.append(f"unit_kind: must be word, char, or omitted, got {cfg.unit_kind!r}")
    for role, block in cfg.backends.items():
        if role not in BACKEND_ROLES:
            problems.append(f"backends.{role}: unknown role (expected one of {BACKEND_ROLES})")
            continue
        if not isinstance(block, dict):
            problems.append(f"backends.{role}: must be a mapping")
            continue
        for key in block:
            if "key" in str(key).lower() and str(key).lower() != "api_key_env":
                problems.append(
                    f"backends.{role}.{key}: secrets are not accepted in config;"
                    f" set api_key_env to the name of an environment variable"
                )
    if problems:
        raise InputError("invalid configuration: " + "; ".join(problems))


def _require_keys(block: dict[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise InputError(f"{where}: unknown keys {sorted(unknown)}")


def _as_path(value: Any, base: Path, where: str) -> Path:
    if not isinstance(value, str) or not value:
        raise InputError(f"{where}: expected a path string, got {value!r}")
    p = Path(value)
    return p if p.is_absolute() else base / p


def _parse_eval(block: Any, base: Path) -> EvalConfig:
    if not isinstance(block, dict):
        raise InputError("eval: must be a mapping")
    _require_keys(block, {"references", "systems", "ground_truth"}, "eval")
    if "references" not in block or "systems" not in block:
        raise InputError("eval: requires references and systems")
    systems = block["systems"]
    if not isinstance(systems, dict) or not systems:
        raise InputError("eval.systems: must map system names to output files")
    return EvalConfig(
        references=_as_path(block["references"], base, "eval.references"),
        systems={
            str(name): _as_path(path, base, f"eval.systems.{name}")
            for name, path in systems.items()
        },
        ground_truth=str(block.get("ground_truth", "GroundTruth")),
    )


def _parse_partition(block: Any) -> PartitionConfig:
    if not isinstance(block, dict):
        raise InputError("partition: must be a mapping")
    _require_keys(block, {"held_out_novels"}, "partition")
    novels = block.get("held_out_novels", [])
    if not isinstance(novels, list) or any(not isinstance(n, str) for n in novels):
        raise InputError("partition.held_out_novels: must be a list of novel ids")
    return PartitionConfig(held_out_novels=tuple(novels))


_TOP_KEYS = {
    "paths",
    "seed",
    "w",
    "k_range",
    "thresholds",
    "instructions_per_record",
    "tolerance",
    "theta",
    "epsilon",
    "workers",
    "unit_kind",
    "backends",
    "eval",
    "partition",
}


def config_from_mapping(data: dict[str, Any], base_dir: Path) -> RunConfig:
    if not isinstance(data, dict):
        raise InputError("config root must be a mapping")
    _require_keys(data, _TOP_KEYS, "config")
    kwargs: dict[str, Any] = {}

    paths = data.get("paths", {})
    if not isinstance(paths, dict):
        raise InputError("paths: must be a mapping")
    _require_keys(paths, set(_PATH_KEYS), "paths")
    for key in _PATH_KEYS:
        if key in paths:
            kwargs[key] = _as_path(paths[key], base_dir, f"paths.{key}")

    thresholds = data.get("thresholds", {})
    if not isinstance(thresholds, dict):
        raise InputError("thresholds: must be a mapping")
    _require_keys(thresholds, {"emotion", "acoustic"}, "thresholds")
    if "emotion" in thresholds:
        kwargs["emotion_threshold"] = thresholds["emotion"]
    if "acoustic" in thresholds:
        kwargs["acoustic_threshold"] = thresholds["acoustic"]

    if "k_range" in data:
        k = data["k_range"]
        if not isinstance(k, list) or len(k) != 2:
            raise InputError(f"k_range: expected [lo, hi], got {k!r}")
        kwargs["k_range"] = (k[0], k[1])

    for key in ("seed", "w", "instructions_per_record", "tolerance", "workers", "unit_kind"):
        if key in data:
            kwargs[key] = data[key]
    for key in ("theta", "epsilon"):
        if key in data:
            kwargs[key] = float(data[key])

    backends = data.get("backends", {})
    if not isinstance(backends, dict):
        raise InputError("backends: must be a mapping of role blocks")
    resolved: dict[str, dict[str, Any]] = {}
    for role, block in backends.items():
        if not isinstance(block, dict):
            raise InputError(f"backends.{role}: must be a mapping")
        block = dict(block)
        for key in ("mock_dir", "script"):
            if key in block:
                block[key] = str(_as_path(block[key], base_dir, f"backends.{role}.{key}"))
        resolved[str(role)] = block
    kwargs["backends"] = resolved

    if "eval" in data:
        kwargs["eval"] = _parse_eval(data["eval"], base_dir)
    if "partition" in data:
        kwargs["partition"] = _parse_partition(data["partition"])

    cfg = RunConfig(**kwargs)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise InputError(f"config file {p} is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    return config_from_mapping(data, p.parent.resolve())


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Layer non-None flag values over the file config; flags win."""
    updates: dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in _PATH_KEYS:
            updates[key] = Path(value).resolve()
        elif key == "k_range":
            updates[key] = (value[0], value[1])
        else:
            updates[key] = value
    cfg = replace(cfg, **updates)
    validate_config(cfg)
    return cfg


def snapshot(cfg: RunConfig, command: str, version: str) -> dict[str, Any]:
    """JSON-safe effective configuration, written next to outputs."""
    out: dict[str, Any] = {"command": command, "toolkit_version": version}
    out["paths"] = {
        key: None if getattr(cfg, key) is None else str(getattr(cfg, key)) for key in _PATH_KEYS
    }
    out["seed"] = cfg.seed
    out["w"] = cfg.w
    out["k_range"] = list(cfg.k_range)
    out["thresholds"] = {"emotion": cfg.emotion_threshold, "acoustic": cfg.acoustic_threshold}
    out["instructions_per_record"] = cfg.instructions_per_record
    out["tolerance"] = cfg.tolerance
    out["theta"] = cfg.theta
    out["epsilon"] = cfg.epsilon
    out["workers"] = cfg.workers
    out["unit_kind"] = cfg.unit_kind
    out["backends"] = {role: dict(block) for role, block in sorted(cfg.backends.items())}
    if cfg.eval is not None:
        out["eval"] = {
            "references": str(cfg.eval.references),
            "systems": {name: str(path) for name, path in sorted(cfg.eval.systems.items())},
            "ground_truth": cfg.eval.ground_truth,
        }
    if cfg.partition is not None:
        out["partition"] = {"held_out_novels": sorted(cfg.partition.held_out_novels)}
    return out
