"""Four-stage tagged response format: grammar, parser, and renderer.

A staged response is a sequence of tagged blocks, one per reasoning stage,
in the canonical order summary -> caption -> reasoning -> conclusion. The
parser is strict: stray text, unbalanced tags, and out-of-order stages are
errors, never silently repaired.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence


class StageKind(enum.Enum):
    SUMMARY = "summary"
    CAPTION = "caption"
    REASONING = "reasoning"
    CONCLUSION = "conclusion"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def from_name(cls, name: str) -> "StageKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown stage name: {name!r}") from None


CANONICAL_ORDER: tuple[StageKind, ...] = (
    StageKind.SUMMARY,
    StageKind.CAPTION,
    StageKind.REASONING,
    StageKind.CONCLUSION,
)


class StageFormatError(ValueError):
    """Base class for staged-response format violations."""


class UnbalancedTagError(StageFormatError):
    """An opening tag has no matching closing tag before other tags or EOF."""


class OutOfOrderError(StageFormatError):
    """A stage repeats or appears after a canonically later stage."""


class MissingStageError(StageFormatError):
    """A complete response was required but stages are missing."""


class StrayTextError(StageFormatError):
    """Non-whitespace text found outside any tag pair."""


def _default_open_tags() -> dict[StageKind, str]:
    return {kind: f"<{kind.name}>" for kind in CANONICAL_ORDER}


def _default_close_tags() -> dict[StageKind, str]:
    return {kind: f"</{kind.name}>" for kind in CANONICAL_ORDER}


@dataclass(frozen=True)
class TagSchema:
    """Open/close tag strings per stage.

    Defaults are the fixed-case tags the generation prompts use. No tag may
    be a substring of another, which keeps the left-to-right scan unambiguous.
    """

    open_tags: dict[StageKind, str] = field(default_factory=_default_open_tags)
    close_tags: dict[StageKind, str] = field(default_factory=_default_close_tags)

    def __post_init__(self) -> None:
        for mapping in (self.open_tags, self.close_tags):
            if set(mapping) != set(CANONICAL_ORDER):
                raise ValueError("schema must define tags for all four stages")
        tags = self.all_tags()
        if any(not t for t in tags):
            raise ValueError("tags must be non-empty")
        if len(set(tags)) != len(tags):
            raise ValueError("tags must be distinct")
        for a in tags:
            for b in tags:
                if a != b and a in b:
                    raise ValueError(f"tag {a!r} is a substring of tag {b!r}")

    def open(self, kind: StageKind) -> str:
        return self.open_tags[kind]

    def close(self, kind: StageKind) -> str:
        return self.close_tags[kind]

    def all_tags(self) -> tuple[str, ...]:
        return tuple(self.open_tags.values()) + tuple(self.close_tags.values())


DEFAULT_SCHEMA = TagSchema()


@dataclass(frozen=True)
class StageBlock:
    """One stage's inner text, tags stripped and surrounding whitespace trimmed."""

    kind: StageKind
    text: str


@dataclass(frozen=True)
class StagedResponse:
    """An ordered sequence of stage blocks forming a (possibly partial) response."""

    blocks: tuple[StageBlock, ...] = ()

    @property
    def kinds(self) -> tuple[StageKind, ...]:
        return tuple(b.kind for b in self.blocks)

    @property
    def is_complete(self) -> bool:
        return self.kinds == CANONICAL_ORDER

    def text_of(self, kind: StageKind) -> Optional[str]:
        for b in self.blocks:
            if b.kind is kind:
                return b.text
        return None

    @property
    def final_text(self) -> str:
        """Text of the last block; the answer surfaced to the caller."""
        if not self.blocks:
            return ""
        return self.blocks[-1].text

    def append(self, block: StageBlock) -> "StagedResponse":
        return StagedResponse(self.blocks + (block,))


EMPTY_RESPONSE = StagedResponse()


def parse_staged(
    text: str,
    schema: TagSchema = DEFAULT_SCHEMA,
    require_complete: bool = False,
    expected_order: Sequence[StageKind] = CANONICAL_ORDER,
) -> StagedResponse:
    """Parse tagged text into a StagedResponse.

    Blocks must follow ``expected_order``: each block strictly later in the
    order than the one before (no repeats, no going back); with
    ``require_complete`` every expected stage must be present. Whitespace
    between blocks is ignored; any other text outside a tag pair is an
    error. Inner text is trimmed but otherwise preserved byte-for-byte.

    Raises:
        StrayTextError: non-whitespace text outside any tag pair.
        UnbalancedTagError: an open tag without its matching close tag next.
        OutOfOrderError: a block that repeats or goes backward in the order.
        MissingStageError: require_complete and fewer blocks than expected.
    """
    order = tuple(expected_order)
    opens = {schema.open(kind): kind for kind in CANONICAL_ORDER}
    all_tags = schema.all_tags()

    blocks: list[StageBlock] = []
    prev_pos = -1
    i = 0
    n = len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        kind = None
        for tag, k in opens.items():
            if text.startswith(tag, i):
                kind = k
                break
        if kind is None:
            snippet = text[i : i + 24]
            raise StrayTextError(f"stray text at offset {i}: {snippet!r}")
        body_start = i + len(schema.open(kind))
        close = schema.close(kind)
        # The matching close tag must be the next tag of any kind; an
        # intervening tag means the block was never properly closed.
        next_pos, next_tag = -1, ""
        for tag in all_tags:
            p = text.find(tag, body_start)
            if p != -1 and (next_pos == -1 or p < next_pos):
                next_pos, next_tag = p, tag
        if next_pos == -1 or next_tag != close:
            raise UnbalancedTagError(
                f"{schema.open(kind)} at offset {i} has no matching {close}"
            )
        if kind not in order:
            raise OutOfOrderError(f"stage {kind.name} is not expected here")
        pos = order.index(kind)
        if pos <= prev_pos:
            raise OutOfOrderError(
                f"stage {kind.name} repeats or appears after a later stage"
            )
        prev_pos = pos
        blocks.append(StageBlock(kind, text[body_start:next_pos].strip()))
        i = next_pos + len(close)

    if require_complete and len(blocks) < len(order):
        seen = {b.kind for b in blocks}
        missing = ", ".join(k.name for k in order if k not in seen)
        raise MissingStageError(f"incomplete response; missing {missing}")
    return StagedResponse(tuple(blocks))


def render_staged(resp: StagedResponse, schema: TagSchema = DEFAULT_SCHEMA) -> str:
    """Render blocks in order, each wrapped in its tag pair, newline-separated."""
    return "\n".join(
        f"{schema.open(b.kind)}{b.text}{schema.close(b.kind)}" for b in resp.blocks
    )


def stop_marker(kind: StageKind, schema: TagSchema = DEFAULT_SCHEMA) -> str:
    """Closing tag for a stage; used as the generation stop sequence."""
    return schema.close(kind)


def parse_stage_continuation(
    raw: str, kind: StageKind, schema: TagSchema = DEFAULT_SCHEMA
) -> StageBlock:
    """Parse one stage's generated continuation (stop marker already stripped).

    Accepts text with or without the leading open tag and rejects any other
    embedded tag, reusing the full parser's error surface.
    """
    body = raw.strip()
    if not body.startswith(schema.open(kind)):
        body = schema.open(kind) + body
    resp = parse_staged(
        body + schema.close(kind), schema, require_complete=True, expected_order=(kind,)
    )
    return resp.blocks[0]


def parse_complete_continuation(
    raw: str,
    pipeline: Sequence[StageKind],
    schema: TagSchema = DEFAULT_SCHEMA,
) -> StagedResponse:
    """Parse a whole-response continuation truncated at the final stop marker."""
    return parse_staged(
        raw + schema.close(tuple(pipeline)[-1]),
        schema,
        require_complete=True,
        expected_order=pipeline,
    )
