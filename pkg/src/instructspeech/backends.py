"""Audio-facing backends: ASR, speaker embeddings, paralinguistic taggers.

Each capability has a scripted file-backed form for offline deterministic
runs and an HTTP client form speaking the sidecar contract.  Scripted
backends never invent data: an audio_ref with no scripted entry raises
ScriptMissing.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import httpx

from .errors import BackendError, InputError
from .evaluation import ScriptMissing
from .tagging import Detection


def detection_from_json(d: dict[str, Any]) -> Detection:
    if "category" not in d:
        raise InputError("detection missing category")
    return Detection(
        category=d["category"],
        confidence=float(d.get("confidence", 1.0)),
        position=None if d.get("position") is None else int(d["position"]),
        candidates=tuple(
            (int(c["position"]), float(c.get("confidence", 1.0)))
            for c in d.get("candidates", ())
        ),
    )


def detection_to_json(det: Detection) -> dict[str, Any]:
    d: dict[str, Any] = {"category": det.category, "confidence": det.confidence}
    if det.position is not None:
        d["position"] = det.position
    if det.candidates:
        d["candidates"] = [{"position": p, "confidence": c} for p, c in det.candidates]
    return d


class _ScriptedLookup:
    kind = "entry"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        try:
            self._table = json.loads(self.path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot load scripted {self.kind} file {self.path}: {exc}") from exc
        if not isinstance(self._table, dict):
            raise InputError(f"scripted {self.kind} file {self.path} must map audio_ref to value")

    def _lookup(self, audio_ref: str) -> Any:
        if audio_ref not in self._table:
            raise ScriptMissing(f"no scripted {self.kind} for audio_ref {audio_ref!r}")
        return self._table[audio_ref]


class ScriptedAsrBackend(_ScriptedLookup):
    kind = "transcription"

    def transcribe(self, audio_ref: str) -> str:
        value = self._lookup(audio_ref)
        if not isinstance(value, str):
            raise InputError(f"scripted transcription for {audio_ref!r} must be a string")
        return value


class ScriptedEmbedBackend(_ScriptedLookup):
    kind = "embedding"

    def embed(self, audio_ref: str) -> list[float]:
        value = self._lookup(audio_ref)
        if not isinstance(value, list):
            raise InputError(f"scripted embedding for {audio_ref!r} must be a list of numbers")
        return [float(x) for x in value]


class ScriptedDetector(_ScriptedLookup):
    kind = "detection"
    strategy = "PC-PTI"

    def detect(self, audio_ref: str) -> list[Detection]:
        value = self._lookup(audio_ref)
        if not isinstance(value, list):
            raise InputError(f"scripted detections for {audio_ref!r} must be a list")
        return [detection_from_json(d) for d in value]


class ScriptedTagger(_ScriptedLookup):
    """Scripted PASR/PRI tagger returning full tagged text per audio_ref."""

    kind = "tagged text"

    def __init__(self, path: str | Path, strategy: str = "PASR"):
        if strategy not in ("PASR", "PRI"):
            raise InputError(f"scripted tagger strategy must be PASR or PRI, got {strategy!r}")
        super().__init__(path)
        self.strategy = strategy

    def tag(self, audio_ref: str, raw: str | None = None) -> str:
        value = self._lookup(audio_ref)
        if not isinstance(value, str):
            raise InputError(f"scripted tagged text for {audio_ref!r} must be a string")
        return value


class _HttpClient:
    def __init__(self, base_url: str, timeout: float = 30.0, client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        url = self.base_url + path
        try:
            response = self._client.post(url, json=payload)
        except httpx.HTTPError as exc:
            raise BackendError(f"{url} unreachable: {exc}") from exc
        if response.status_code != 200:
            raise BackendError(f"{url} returned {response.status_code}: {response.text}")
        body = response.json()
        if not isinstance(body, dict):
            raise BackendError(f"{url} returned a non-object body")
        return body


class HttpAsrBackend(_HttpClient):
    def transcribe(self, audio_ref: str) -> str:
        body = self._post("/asr/transcribe", {"audio_ref": audio_ref})
        if not isinstance(body.get("text"), str):
            raise BackendError("ASR reply missing text")
        return body["text"]


class HttpEmbedBackend(_HttpClient):
    def embed(self, audio_ref: str) -> list[float]:
        body = self._post("/embed/speaker", {"audio_ref": audio_ref})
        vector = body.get("vector")
        if not isinstance(vector, list) or not vector:
            raise BackendError("embedding reply missing vector")
        return [float(x) for x in vector]


class HttpDetector(_HttpClient):
    strategy = "PC-PTI"

    def detect(self, audio_ref: str) -> list[Detection]:
        body = self._post("/para/detect", {"audio_ref": audio_ref})
        events = body.get("events")
        if not isinstance(events, list):
            raise BackendError("detector reply missing events")
        return [detection_from_json(e) for e in events]


class HttpTagger(_HttpClient):
    def __init__(
        self,
        base_url: str,
        strategy: str = "PASR",
        timeout: float = 30.0,
        client: httpx.Client | None = None,
    ):
        if strategy not in ("PASR", "PRI"):
            raise InputError(f"tagger strategy must be PASR or PRI, got {strategy!r}")
        super().__init__(base_url, timeout, client)
        self.strategy = strategy

    def tag(self, audio_ref: str, raw: str | None = None) -> str:
        payload: dict[str, Any] = {"audio_ref": audio_ref}
        if raw is not None:
            payload["raw"] = raw
        body = self._post("/para/tag", payload)
        if not isinstance(body.get("tagged_text"), str):
            raise BackendError("tagger reply missing tagged_text")
        return body["tagged_text"]
