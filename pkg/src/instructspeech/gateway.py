"""Chat-completion gateway: templating, backends, retries, structured repair.

All LLM traffic flows through Gateway.complete/complete_structured.  The
backend is either a remote HTTP chat endpoint or a scripted mock that
replays reply files keyed by (template_id, record_id, round); a missing
mock key is a hard error so offline runs can never invent data.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import httpx

from .errors import BackendError, InputError, ToolkitError

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 3
DEFAULT_REPAIR_ROUNDS = 3
DEFAULT_BACKOFF = 0.5


class MissingPlaceholder(InputError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"binding for placeholder {{{name}}} missing")


class BackendUnavailable(BackendError):
    pass


class RateLimitTimeout(BackendError):
    pass


class MockReplyMissing(BackendError):
    pass


class UnparseableAfterRepairs(ToolkitError):
    def __init__(self, rounds: int, last_reply: str, errors: list[str]):
        self.rounds = rounds
        self.last_reply = last_reply
        self.errors = errors
        super().__init__(
            f"reply still invalid after {rounds} repair rounds: {'; '.join(errors)}"
        )


_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_placeholders: frozenset[str]

    @classmethod
    def from_body(cls, template_id: str, body: str) -> "PromptTemplate":
        return cls(template_id, body, frozenset(_PLACEHOLDER.findall(body)))

    def __post_init__(self) -> None:
        present = set(_PLACEHOLDER.findall(self.body))
        missing = self.required_placeholders - present
        if missing:
            raise InputError(
                f"template {self.template_id}: declared placeholders absent: {sorted(missing)}"
            )


def render(template: PromptTemplate, bindings: dict[str, str]) -> str:
    missing = template.required_placeholders - bindings.keys()
    if missing:
        raise MissingPlaceholder(sorted(missing)[0])
    extra = bindings.keys() - set(_PLACEHOLDER.findall(template.body))
    if extra:
        log.warning("template %s: unused bindings %s", template.template_id, sorted(extra))
    return _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), template.body)


def load_templates(prompts_dir: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Template per .txt file; the filename stem is the template id."""
    if prompts_dir is None:
        from importlib import resources

        root = resources.files("instructspeech.data").joinpath("prompts")
        items = [(p.name, p.read_text(encoding="utf-8")) for p in root.iterdir()]
    else:
        items = [
            (p.name, p.read_text(encoding="utf-8"))
            for p in sorted(Path(prompts_dir).glob("*.txt"))
        ]
    templates = {}
    for name, body in sorted(items):
        if not name.endswith(".txt"):
            continue
        tid = name[: -len(".txt")]
        templates[tid] = PromptTemplate.from_body(tid, body.rstrip("\n"))
    return templates


@dataclass(frozen=True)
class FieldSpec:
    kind: str  # "int" | "string" | "list" | "int_list"
    required: bool = True
    lo: int | None = None
    hi: int | None = None
    length: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("int", "string", "list", "int_list"):
            raise InputError(f"unknown field kind {self.kind!r}")
        if self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise InputError(f"range [{self.lo},{self.hi}] is empty")

    def describe(self) -> str:
        bounds = ""
        if self.lo is not None and self.hi is not None:
            bounds = f" between {self.lo} and {self.hi}"
        if self.kind == "int":
            return f"integer{bounds}"
        if self.kind == "list":
            return "JSON array of strings"
        if self.kind == "int_list":
            size = f" of length {self.length}" if self.length is not None else ""
            return f"JSON array{size} of integers{bounds}"
        return self.kind

    def _check_int(self, name: str, value: Any) -> list[str]:
        if isinstance(value, bool) or not isinstance(value, int):
            return [f"{name}: expected an integer"]
        if self.lo is not None and value < self.lo:
            return [f"{name}: {value} below {self.lo}"]
        if self.hi is not None and value > self.hi:
            return [f"{name}: {value} above {self.hi}"]
        return []

    def check(self, name: str, value: Any) -> list[str]:
        if self.kind == "int":
            return self._check_int(name, value)
        if self.kind == "string":
            if not isinstance(value, str):
                return [f"{name}: expected a string"]
        elif self.kind == "list":
            if not isinstance(value, list) or any(not isinstance(x, str) for x in value):
                return [f"{name}: expected an array of strings"]
        elif self.kind == "int_list":
            if not isinstance(value, list):
                return [f"{name}: expected an array of integers"]
            if self.length is not None and len(value) != self.length:
                return [f"{name}: expected exactly {self.length} items"]
            errors = []
            for i, item in enumerate(value):
                errors.extend(self._check_int(f"{name}[{i}]", item))
            return errors
        return []


@dataclass(frozen=True)
class StructuredSchema:
    fields: dict[str, FieldSpec]

    def describe(self) -> str:
        lines = ["Reply with a single JSON object with exactly these fields:"]
        for name, spec in self.fields.items():
            opt = "" if spec.required else " (optional)"
            lines.append(f'- "{name}": {spec.describe()}{opt}')
        return "\n".join(lines)

    def validate(self, obj: Any) -> list[str]:
        if not isinstance(obj, dict):
            return ["reply is not a JSON object"]
        errors: list[str] = []
        for name, spec in self.fields.items():
            if name not in obj:
                if spec.required:
                    errors.append(f"{name}: missing")
                continue
            errors.extend(spec.check(name, obj[name]))
        return errors


_JSON_FENCE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def extract_json(text: str) -> Any:
    """Parse the reply's JSON object: fenced block first, else first balanced {...}."""
    m = _JSON_FENCE.search(text)
    if m:
        return json.loads(m.group(1))
    start = text.find("{")
    if start < 0:
        raise ValueError("no JSON object found in reply")
    depth = 0
    in_string = False
    escape = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return json.loads(text[start : i + 1])
    raise ValueError("unbalanced JSON object in reply")


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.7
    max_tokens: int = 1024
    seed: int | None = None


@dataclass(frozen=True)
class ChatRequest:
    template_id: str
    record_id: str
    bindings: dict[str, str]
    decode: DecodeParams = DecodeParams()
    schema: StructuredSchema | None = None


class ChatBackend(Protocol):
    def send(
        self, messages: list[dict[str, str]], decode: DecodeParams, key: tuple[str, str, int]
    ) -> str: ...


def mock_reply_name(template_id: str, record_id: str, round_no: int) -> str:
    digest = hashlib.sha256(
        b"\x1f".join(p.encode("utf-8") for p in (template_id, record_id, str(round_no)))
    ).hexdigest()
    return f"{digest}.txt"


class MockChatBackend:
    """Replays reply files from a directory; unknown keys fail hard."""

    def __init__(self, replies_dir: str | Path):
        self.replies_dir = Path(replies_dir)

    def send(
        self, messages: list[dict[str, str]], decode: DecodeParams, key: tuple[str, str, int]
    ) -> str:
        path = self.replies_dir / mock_reply_name(*key)
        if not path.is_file():
            raise MockReplyMissing(
                f"no scripted reply for template={key[0]} record={key[1]} round={key[2]}"
            )
        return path.read_text(encoding="utf-8")


def write_mock_reply(
    replies_dir: str | Path, template_id: str, record_id: str, round_no: int, reply: str
) -> Path:
    path = Path(replies_dir) / mock_reply_name(template_id, record_id, round_no)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(reply, encoding="utf-8")
    return path


class TransportFailure(BackendError):
    """Retryable transport-level failure (network, 5xx, 429)."""


class HttpChatBackend:
    """POSTs the de-facto chat-completion JSON shape to one endpoint."""

    def __init__(
        self,
        url: str,
        model: str,
        api_key_env: str = "LLM_API_KEY",
        timeout: float = 60.0,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self._client = client or httpx.Client(timeout=timeout)

    def send(
        self, messages: list[dict[str, str]], decode: DecodeParams, key: tuple[str, str, int]
    ) -> str:
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": decode.temperature,
            "max_tokens": decode.max_tokens,
        }
        if decode.seed is not None:
            payload["seed"] = decode.seed
        headers = {}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            response = self._client.post(self.url, json=payload, headers=headers)
        except httpx.HTTPError as exc:
            raise TransportFailure(f"chat endpoint unreachable: {exc}") from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransportFailure(f"chat endpoint returned {response.status_code}")
        if response.status_code != 200:
            raise BackendError(f"chat endpoint returned {response.status_code}: {response.text}")
        body = response.json()
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            if isinstance(body, dict) and isinstance(body.get("content"), str):
                return body["content"]
            raise BackendError("chat reply missing choices[0].message.content") from None


class RateLimiter:
    """Minimum-spacing limiter: at most rps calls in any 1-second window."""

    def __init__(
        self,
        rps: float | None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        timeout: float | None = None,
    ):
        if rps is not None and rps <= 0:
            raise InputError("requests-per-second must be positive")
        self.rps = rps
        self._clock = clock
        self._sleep = sleep
        self._timeout = timeout
        self._lock = threading.Lock()
        self._next_slot = 0.0

    def acquire(self) -> None:
        if self.rps is None:
            return
        spacing = 1.0 / self.rps
        with self._lock:
            now = self._clock()
            wait = self._next_slot - now
            if wait > 0:
                if self._timeout is not None and wait > self._timeout:
                    raise RateLimitTimeout(f"rate limiter backlog {wait:.2f}s exceeds timeout")
                self._sleep(wait)
                now = self._next_slot
            self._next_slot = max(now, self._next_slot) + spacing


@dataclass
class Gateway:
    """Shared entry point for all chat calls; thread-safe."""

    backend: ChatBackend
    templates: dict[str, PromptTemplate]
    limiter: RateLimiter = field(default_factory=lambda: RateLimiter(None))
    retries: int = DEFAULT_RETRIES
    repair_rounds: int = DEFAULT_REPAIR_ROUNDS
    backoff_base: float = DEFAULT_BACKOFF
    sleep: Callable[[float], None] = time.sleep

    def _template(self, template_id: str) -> PromptTemplate:
        if template_id not in self.templates:
            raise InputError(f"unknown template {template_id!r}")
        return self.templates[template_id]

    def _send(
        self, messages: list[dict[str, str]], req: ChatRequest, round_no: int
    ) -> str:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            self.limiter.acquire()
            try:
                return self.backend.send(
                    messages, req.decode, (req.template_id, req.record_id, round_no)
                )
            except TransportFailure as exc:
                last = exc
                if attempt < self.retries:
                    delay = self.backoff_base * (2**attempt)
                    log.warning(
                        "backend failure (attempt %d/%d), retrying in %.2fs: %s",
                        attempt + 1,
                        self.retries + 1,
                        delay,
                        exc,
                    )
                    self.sleep(delay)
        raise BackendUnavailable(f"backend failed after {self.retries + 1} attempts: {last}")

    def complete(self, req: ChatRequest) -> str:
        prompt = render(self._template(req.template_id), req.bindings)
        return self._send([{"role": "user", "content": prompt}], req, 0)

    def complete_structured(
        self,
        req: ChatRequest,
        extra: Callable[[dict[str, Any]], list[str]] | None = None,
    ) -> dict[str, Any]:
        if req.schema is None:
            raise InputError("complete_structured requires a schema on the request")
        prompt = render(self._template(req.template_id), req.bindings)
        messages = [{"role": "user", "content": prompt}]
        reply = ""
        errors: list[str] = []
        for round_no in range(self.repair_rounds + 1):
            reply = self._send(messages, req, round_no)
            try:
                obj = extract_json(reply)
                errors = req.schema.validate(obj)
                if not errors and extra is not None:
                    errors = extra(obj)
            except (ValueError, json.JSONDecodeError) as exc:
                obj = None
                errors = [str(exc)]
            if not errors:
                assert isinstance(obj, dict)
                return obj
            if round_no < self.repair_rounds:
                repair = (
                    "Your previous reply was invalid: "
                    + "; ".join(errors)
                    + "\n\n"
                    + req.schema.describe()
                    + "\n\nReply again with only the corrected JSON object."
                )
                messages = messages + [
                    {"role": "assistant", "content": reply},
                    {"role": "user", "content": repair},
                ]
        raise UnparseableAfterRepairs(self.repair_rounds, reply, errors)
