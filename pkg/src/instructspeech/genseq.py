"""Codec for staged generation sequences: think block, enhanced transcript,
interleaved text/audio token stream.

Wire grammar (one sequence, UTF-8):

    [<think>REASONING</think>\n]
    [label1, label2, ...] BODY-WITH-INLINE-TAGS
    [\n<|stream:T,A|>\n  item item item ...]

The header bracket is always present (``[]`` when no labels).  Audio tokens
serialize as ``<|audio:ID|>``; text tokens are space-free words that never
carry the special ``<|...|>`` wrapping.  Parse errors report byte offsets
into the input.  Fixture files put the mode name on line 1 and the
sequence after it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import InputError, ToolkitError
from .tagging import ParalinguisticEvent, TaggedTranscript, insert_tags, render_tagged
from .vocab import TagVocabulary, default_vocabulary

MODES = ("plain", "T", "EP", "TEP")
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
DEFAULT_CHUNKING = (1, 4)

_AUDIO_TOKEN = re.compile(r"<\|audio:(\d+)\|>\Z")
_INLINE_TAG = re.compile(r"<\|([^|<>]+)\|>")
_STREAM_MARKER = re.compile(r"<\|stream:(\d+),(\d+)\|>\Z")


class ParseError(ToolkitError):
    def __init__(self, message: str, byte_offset: int):
        self.byte_offset = byte_offset
        super().__init__(f"{message} (byte {byte_offset})")


class MalformedHeader(ParseError):
    pass


class UnknownInlineTag(ParseError):
    def __init__(self, name: str, byte_offset: int):
        self.name = name
        super().__init__(f"inline tag <|{name}|> not in vocabulary", byte_offset)


class UnclosedThink(ParseError):
    pass


class MalformedStream(ParseError):
    pass


class MissingThink(ToolkitError):
    pass


class StrayThink(ToolkitError):
    pass


class ModeMismatch(ToolkitError):
    pass


def _byte_offset(s: str, index: int) -> int:
    return len(s[:index].encode("utf-8"))


@dataclass(frozen=True)
class ThinkBlock:
    text: str


@dataclass(frozen=True)
class EnhancedTranscript:
    emotions: tuple[str, ...]
    body: TaggedTranscript

    def __post_init__(self) -> None:
        for label in self.emotions:
            if not label or label != label.strip() or any(c in label for c in ",]\n"):
                raise InputError(f"bad emotion label {label!r}")


@dataclass(frozen=True)
class TextToken:
    text: str


@dataclass(frozen=True)
class AudioToken:
    id: int


StreamItem = TextToken | AudioToken


@dataclass(frozen=True)
class InterleavedStream:
    items: tuple[StreamItem, ...]
    chunking: tuple[int, int] = DEFAULT_CHUNKING


@dataclass(frozen=True)
class TepSequence:
    mode: str
    transcript: EnhancedTranscript
    think: ThinkBlock | None = None
    stream: InterleavedStream = InterleavedStream(())


def validate_token_text(text: str) -> None:
    if not text or any(ch.isspace() for ch in text):
        raise InputError(f"text token must be one non-empty space-free word: {text!r}")
    if text.startswith("<|") and text.endswith("|>"):
        raise InputError(f"text token may not use the special token wrapping: {text!r}")


def validate_sequence(seq: TepSequence) -> None:
    """Mode-consistency rules shared by render and parse."""
    if seq.mode not in MODES:
        raise InputError(f"unknown mode {seq.mode!r}")
    thinking = seq.mode in ("T", "TEP")
    if thinking and (seq.think is None or not seq.think.text.strip()):
        raise MissingThink(f"mode {seq.mode} requires a non-empty think block")
    if not thinking and seq.think is not None:
        raise StrayThink(f"mode {seq.mode} forbids a think block")
    enhanced = seq.mode in ("EP", "TEP")
    if enhanced and not seq.transcript.emotions:
        raise ModeMismatch(f"mode {seq.mode} requires at least one emotion label")
    if not enhanced and (seq.transcript.emotions or seq.transcript.body.events):
        raise ModeMismatch(f"mode {seq.mode} forbids emotion labels and tags")


def render_enhanced(t: EnhancedTranscript, vocab: TagVocabulary | None = None) -> str:
    body = render_tagged(t.body, vocab)
    if "\n" in body:
        raise InputError("transcript body may not contain newlines")
    header = "[" + ", ".join(t.emotions) + "]"
    return f"{header} {body}" if body else header


def parse_enhanced(
    s: str, vocab: TagVocabulary | None = None, base_offset: int = 0
) -> EnhancedTranscript:
    """Inverse of render_enhanced; inline tags must be vocabulary members."""
    if vocab is None:
        vocab = default_vocabulary()
    if not s.startswith("["):
        raise MalformedHeader("expected leading [label, ...] header", base_offset)
    close = s.find("]")
    if close < 0:
        raise MalformedHeader("unclosed label header", base_offset)
    inner = s[1:close]
    if inner.strip():
        labels = tuple(part.strip() for part in inner.split(","))
        if any(not label for label in labels):
            raise MalformedHeader(
                "empty label in header", base_offset + _byte_offset(s, 1)
            )
    else:
        labels = ()
    body_start = close + 1
    if s[body_start : body_start + 1] == " ":
        body_start += 1
    body_text = s[body_start:]
    raw_parts: list[str] = []
    raw_len = 0
    events: list[ParalinguisticEvent] = []
    pos = 0
    for m in _INLINE_TAG.finditer(body_text):
        entry = vocab.lookup(m.group(1))
        if entry is None:
            raise UnknownInlineTag(
                m.group(1),
                base_offset + _byte_offset(s, body_start) + _byte_offset(body_text, m.start()),
            )
        chunk = body_text[pos : m.start()]
        raw_parts.append(chunk)
        raw_len += len(chunk)
        events.append(ParalinguisticEvent(entry.canonical_name, raw_len))
        pos = m.end()
        if pos < len(body_text) and body_text[pos] == " ":
            pos += 1
    raw_parts.append(body_text[pos:])
    raw = "".join(raw_parts)
    return EnhancedTranscript(emotions=labels, body=insert_tags(raw, events, vocab))


def render_stream_items(stream: InterleavedStream) -> str:
    parts: list[str] = []
    for item in stream.items:
        if isinstance(item, AudioToken):
            if item.id < 0:
                raise InputError(f"audio token id must be non-negative: {item.id}")
            parts.append(f"<|audio:{item.id}|>")
        else:
            validate_token_text(item.text)
            parts.append(item.text)
    return " ".join(parts)


def render_tep(seq: TepSequence, vocab: TagVocabulary | None = None) -> str:
    validate_sequence(seq)
    parts: list[str] = []
    if seq.think is not None:
        if THINK_CLOSE in seq.think.text:
            raise InputError("think text may not contain the closing delimiter")
        parts.append(f"{THINK_OPEN}{seq.think.text}{THINK_CLOSE}\n")
    parts.append(render_enhanced(seq.transcript, vocab))
    if seq.stream.items or seq.stream.chunking != DEFAULT_CHUNKING:
        t_chunk, a_chunk = seq.stream.chunking
        if t_chunk < 1 or a_chunk < 1:
            raise InputError("chunking parts must be >= 1")
        parts.append(f"\n<|stream:{t_chunk},{a_chunk}|>\n")
        parts.append(render_stream_items(seq.stream))
    return "".join(parts)


def _parse_stream(
    marker_line: str, items_line: str, s: str, marker_index: int, codebook_size: int | None
) -> InterleavedStream:
    m = _STREAM_MARKER.match(marker_line)
    if m is None:
        raise MalformedStream("bad stream marker line", _byte_offset(s, marker_index))
    chunking = (int(m.group(1)), int(m.group(2)))
    if chunking[0] < 1 or chunking[1] < 1:
        raise MalformedStream("chunking parts must be >= 1", _byte_offset(s, marker_index))
    items: list[StreamItem] = []
    items_index = marker_index + len(marker_line) + 1
    cursor = 0
    for token in items_line.split(" ") if items_line else []:
        token_at = items_index + cursor
        cursor += len(token) + 1
        audio = _AUDIO_TOKEN.match(token)
        if audio:
            token_id = int(audio.group(1))
            if codebook_size is not None and token_id >= codebook_size:
                raise MalformedStream(
                    f"audio id {token_id} outside codebook of {codebook_size}",
                    _byte_offset(s, token_at),
                )
            items.append(AudioToken(token_id))
            continue
        try:
            validate_token_text(token)
        except InputError as exc:
            raise MalformedStream(str(exc), _byte_offset(s, token_at)) from exc
        items.append(TextToken(token))
    return InterleavedStream(tuple(items), chunking)


def parse_tep(
    raw_model_output: str,
    mode: str,
    vocab: TagVocabulary | None = None,
    codebook_size: int | None = None,
) -> TepSequence:
    s = raw_model_output
    think: ThinkBlock | None = None
    rest = s
    rest_index = 0
    if s.startswith(THINK_OPEN):
        end = s.find(THINK_CLOSE)
        if end < 0:
            raise UnclosedThink("think block never closed", _byte_offset(s, 0))
        think = ThinkBlock(s[len(THINK_OPEN) : end])
        rest_index = end + len(THINK_CLOSE)
        if rest_index < len(s) and s[rest_index] == "\n":
            rest_index += 1
        rest = s[rest_index:]
    stream = InterleavedStream(())
    marker_split = re.search(r"(?:^|\n)<\|stream:", rest)
    if marker_split:
        payload = rest[: marker_split.start()]
        stream_text = rest[marker_split.start() :].lstrip("\n")
        lines = stream_text.split("\n", 1)
        marker_index = rest_index + marker_split.start() + (1 if marker_split.group(0).startswith("\n") else 0)
        stream = _parse_stream(
            lines[0], lines[1] if len(lines) > 1 else "", s, marker_index, codebook_size
        )
    else:
        payload = rest
    transcript = parse_enhanced(payload, vocab, base_offset=_byte_offset(s, rest_index))
    seq = TepSequence(mode=mode, transcript=transcript, think=think, stream=stream)
    validate_sequence(seq)
    return seq


def interleave(
    text_tokens: list[str],
    audio_tokens: list[int],
    chunking: tuple[int, int] = DEFAULT_CHUNKING,
) -> InterleavedStream:
    """Alternate chunks of text and audio; tails shorter than a chunk pass as-is."""
    t_chunk, a_chunk = chunking
    if t_chunk < 1 or a_chunk < 1:
        raise InputError("chunking parts must be >= 1")
    items: list[StreamItem] = []
    ti = ai = 0
    while ti < len(text_tokens) or ai < len(audio_tokens):
        for text in text_tokens[ti : ti + t_chunk]:
            validate_token_text(text)
            items.append(TextToken(text))
        ti += t_chunk
        for token_id in audio_tokens[ai : ai + a_chunk]:
            if token_id < 0:
                raise InputError(f"audio token id must be non-negative: {token_id}")
            items.append(AudioToken(token_id))
        ai += a_chunk
    return InterleavedStream(tuple(items), chunking)


def deinterleave(stream: InterleavedStream) -> tuple[list[str], list[int]]:
    texts = [item.text for item in stream.items if isinstance(item, TextToken)]
    audios = [item.id for item in stream.items if isinstance(item, AudioToken)]
    return texts, audios


def to_fixture(seq: TepSequence, vocab: TagVocabulary | None = None) -> str:
    return seq.mode + "\n" + render_tep(seq, vocab)


def from_fixture(text: str, vocab: TagVocabulary | None = None) -> TepSequence:
    mode, _, rest = text.partition("\n")
    if mode not in MODES:
        raise InputError(f"fixture line 1 must name a mode, got {mode!r}")
    return parse_tep(rest, mode, vocab)
