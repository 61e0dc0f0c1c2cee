"""Reflective control-token vocabulary and the interleaved segment format.

Generations are streams of plain text, bracketed control tokens, and evidence
paragraphs delimited by ``<paragraph>`` ... ``</paragraph>``. The bracketed
surface forms are a closed, bit-exact wire vocabulary shared with the backend
and annotation layers; anything else in brackets is untrusted model output and
degrades to plain text with a diagnostic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterator, Union

from .errors import UnclosedParagraphError


class TokenKind(Enum):
    """The four control-token families."""

    RET = "RET"  # retrieve now?
    REL = "REL"  # is the evidence relevant?
    SUP = "SUP"  # is the answer supported by the evidence?
    USE = "USE"  # how useful is the answer overall?


class RetrievalDecision(Enum):
    RETRIEVAL = "Retrieval"
    NO_RETRIEVAL = "NoRetrieval"
    CONTINUE = "Continue"


class RelevanceLabel(Enum):
    RELEVANT = "Relevant"
    IRRELEVANT = "Irrelevant"


class SupportLabel(Enum):
    FULLY = "FullySupported"
    PARTIALLY = "PartiallySupported"
    NONE = "NoSupport"


class UtilityLevel(IntEnum):
    U1 = 1
    U2 = 2
    U3 = 3
    U4 = 4
    U5 = 5


TokenValue = Union[RetrievalDecision, RelevanceLabel, SupportLabel, UtilityLevel]

_KIND_OF_VALUE_TYPE: dict[type, TokenKind] = {
    RetrievalDecision: TokenKind.RET,
    RelevanceLabel: TokenKind.REL,
    SupportLabel: TokenKind.SUP,
    UtilityLevel: TokenKind.USE,
}

VOCABULARY: dict[TokenKind, tuple[TokenValue, ...]] = {
    TokenKind.RET: tuple(RetrievalDecision),
    TokenKind.REL: tuple(RelevanceLabel),
    TokenKind.SUP: tuple(SupportLabel),
    TokenKind.USE: tuple(UtilityLevel),
}

SURFACE_FORMS: dict[TokenValue, str] = {
    RetrievalDecision.RETRIEVAL: "[Retrieval]",
    RetrievalDecision.NO_RETRIEVAL: "[No Retrieval]",
    RetrievalDecision.CONTINUE: "[Continue Generation]",
    RelevanceLabel.RELEVANT: "[Relevant]",
    RelevanceLabel.IRRELEVANT: "[Irrelevant]",
    SupportLabel.FULLY: "[Fully supported]",
    SupportLabel.PARTIALLY: "[Partially supported]",
    SupportLabel.NONE: "[No support / Contradictory]",
    UtilityLevel.U1: "[Utility:1]",
    UtilityLevel.U2: "[Utility:2]",
    UtilityLevel.U3: "[Utility:3]",
    UtilityLevel.U4: "[Utility:4]",
    UtilityLevel.U5: "[Utility:5]",
}

# Accepted on parse only; canonicalized to [Continue Generation] on output.
_ALIASES: dict[str, TokenValue] = {
    "[Continue to Use Evidence]": RetrievalDecision.CONTINUE,
}


@dataclass(frozen=True)
class ReflectiveToken:
    """A single control token; its value is closed over its kind's vocabulary."""

    kind: TokenKind
    value: TokenValue

    def __post_init__(self) -> None:
        expected = _KIND_OF_VALUE_TYPE.get(type(self.value))
        if expected is None or expected is not self.kind:
            raise ValueError(f"value {self.value!r} does not belong to kind {self.kind.value}")

    @property
    def surface(self) -> str:
        return SURFACE_FORMS[self.value]


def token(value: TokenValue) -> ReflectiveToken:
    """Build a token from a vocabulary value, inferring its kind."""
    return ReflectiveToken(_KIND_OF_VALUE_TYPE[type(value)], value)


PARSE_TABLE: dict[str, ReflectiveToken] = {
    surface: token(value) for value, surface in SURFACE_FORMS.items()
}
PARSE_TABLE.update({surface: token(value) for surface, value in _ALIASES.items()})


@dataclass(frozen=True)
class Text:
    content: str


@dataclass(frozen=True)
class Paragraph:
    content: str


SegmentItem = Union[Text, Paragraph, ReflectiveToken]

PARAGRAPH_OPEN = "<paragraph>"
PARAGRAPH_CLOSE = "</paragraph>"

_BRACKETED = re.compile(r"\[[^\[\]]*\]")


@dataclass(frozen=True)
class SegmentStream:
    """An ordered interleaving of text, control tokens, and evidence paragraphs.

    ``diagnostics`` records recoverable oddities found while parsing (unknown
    bracketed strings, stray paragraph markers). It never participates in
    equality: two streams with the same items are the same stream.
    """

    items: tuple[SegmentItem, ...] = ()
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    def tokens(self, kind: TokenKind | None = None) -> Iterator[ReflectiveToken]:
        for item in self.items:
            if isinstance(item, ReflectiveToken) and (kind is None or item.kind is kind):
                yield item

    def first_token(self, kind: TokenKind) -> ReflectiveToken | None:
        return next(self.tokens(kind), None)

    def last_token(self, kind: TokenKind) -> ReflectiveToken | None:
        found = None
        for tok in self.tokens(kind):
            found = tok
        return found

    def paragraphs(self) -> list[Paragraph]:
        return [item for item in self.items if isinstance(item, Paragraph)]


def parse_stream(raw: str) -> SegmentStream:
    """Split raw model output into text, control tokens, and paragraphs.

    Only the canonical surface forms (plus the accepted alias) become tokens;
    unknown bracketed substrings stay in the text and are reported in the
    stream diagnostics. Whitespace-only gaps between structural items are
    dropped, so re-parsing serialized output reproduces the same stream.
    Token-free input comes back as a single Text item equal to the input.

    Raises UnclosedParagraphError when a ``<paragraph>`` never closes.
    """
    items: list[SegmentItem] = []
    diagnostics: list[str] = []
    buffer: list[str] = []

    def flush() -> None:
        if buffer:
            items.append(Text("".join(buffer)))
            buffer.clear()

    pos = 0
    length = len(raw)
    while pos < length:
        par_at = raw.find(PARAGRAPH_OPEN, pos)
        bracket = _BRACKETED.search(raw, pos)
        bracket_at = bracket.start() if bracket else -1

        if par_at == -1 and bracket is None:
            buffer.append(raw[pos:])
            break

        if par_at != -1 and (bracket is None or par_at <= bracket_at):
            buffer.append(raw[pos:par_at])
            close_at = raw.find(PARAGRAPH_CLOSE, par_at + len(PARAGRAPH_OPEN))
            if close_at == -1:
                raise UnclosedParagraphError(
                    f"paragraph opened at offset {par_at} is never closed"
                )
            content = raw[par_at + len(PARAGRAPH_OPEN) : close_at]
            if PARAGRAPH_OPEN in content:
                diagnostics.append("nested paragraph marker inside a paragraph")
            flush()
            items.append(Paragraph(content))
            pos = close_at + len(PARAGRAPH_CLOSE)
            continue

        span = bracket.group(0)
        if span in PARSE_TABLE:
            buffer.append(raw[pos : bracket_at])
            flush()
            items.append(PARSE_TABLE[span])
            pos = bracket.end()
        elif PARAGRAPH_OPEN in span or PARAGRAPH_CLOSE in span:
            # Do not let a stray bracket swallow a paragraph marker.
            buffer.append(raw[pos : bracket_at + 1])
            pos = bracket_at + 1
        else:
            diagnostics.append(f"unknown bracketed token: {span}")
            buffer.append(raw[pos : bracket.end()])
            pos = bracket.end()

    flush()

    has_structure = any(not isinstance(item, Text) for item in items)
    if has_structure:
        items = [
            item
            for item in items
            if not (isinstance(item, Text) and item.content.strip() == "")
        ]
    for item in items:
        if isinstance(item, Text) and PARAGRAPH_CLOSE in item.content:
            diagnostics.append("unmatched paragraph close marker")

    return SegmentStream(tuple(items), tuple(diagnostics))


def serialize_stream(stream: SegmentStream) -> str:
    """Render a stream back to its canonical wire form.

    Token and paragraph items are emitted in their canonical surface forms,
    separated by a single space when directly adjacent; text items are emitted
    verbatim. ``parse_stream(serialize_stream(s)) == s`` for canonical streams
    (no whitespace-only or marker-bearing text, no adjacent text items).
    """
    parts: list[str] = []
    previous_structural = False
    for item in stream.items:
        if isinstance(item, Text):
            parts.append(item.content)
            previous_structural = False
            continue
        if previous_structural:
            parts.append(" ")
        if isinstance(item, Paragraph):
            parts.append(f"{PARAGRAPH_OPEN}{item.content}{PARAGRAPH_CLOSE}")
        else:
            parts.append(item.surface)
        previous_structural = True
    return "".join(parts)


def canonicalize(raw: str) -> str:
    """Canonical wire form of raw text: parse then serialize."""
    return serialize_stream(parse_stream(raw))


def strip_tokens(stream: SegmentStream) -> str:
    """Plain prose of a stream: text items only, single-space joined, trimmed."""
    pieces = (item.content.strip() for item in stream.items if isinstance(item, Text))
    return " ".join(piece for piece in pieces if piece)
