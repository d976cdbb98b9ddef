"""Interleaved caption grammar: ``[index]<phrase>`` entities inside plain text.

    CAPTION := (TEXT | ENTITY)*
    ENTITY  := '[' DIGITS ']' '<' PHRASE '>'

TEXT may not contain any of ``[ ] < >``; PHRASE may not contain ``< >`` and
must be non-empty.  Every error carries the character position where parsing
failed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

_RESERVED = "[]<>"


class CaptionParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position
        self.reason = message


@dataclass(frozen=True)
class CaptionEntity:
    ann_id: int
    phrase: str
    span: tuple          # (start, end) of the phrase characters in ``raw``


@dataclass
class InterleavedCaption:
    parts: list = field(default_factory=list)     # str | CaptionEntity, in order

    @property
    def entities(self) -> list:
        return [p for p in self.parts if isinstance(p, CaptionEntity)]

    @property
    def raw(self) -> str:
        return serialize_caption(self)

    @property
    def plain_text(self) -> str:
        """The caption with entity markup stripped (phrases kept)."""
        return "".join(p if isinstance(p, str) else p.phrase for p in self.parts)

    @classmethod
    def build(cls, pieces) -> "InterleavedCaption":
        """From a list of ``str`` and ``(ann_id, phrase)`` pairs; spans are filled in."""
        parts, pos = [], 0
        for piece in pieces:
            if isinstance(piece, str):
                if piece:
                    if parts and isinstance(parts[-1], str):
                        parts[-1] += piece
                    else:
                        parts.append(piece)
                    pos += len(piece)
            else:
                ann_id, phrase = piece
                head = f"[{int(ann_id)}]<"
                start = pos + len(head)
                parts.append(CaptionEntity(int(ann_id), phrase, (start, start + len(phrase))))
                pos = start + len(phrase) + 1
        return cls(parts)


def parse_caption(raw: str) -> InterleavedCaption:
    parts = []
    text_start = 0
    i, n = 0, len(raw)
    while i < n:
        ch = raw[i]
        if ch in "]<>":
            raise CaptionParseError(f"unexpected {ch!r} in text", i)
        if ch != "[":
            i += 1
            continue
        if i > text_start:
            parts.append(raw[text_start:i])
        j = i + 1
        while j < n and raw[j].isdigit() and raw[j].isascii():
            j += 1
        if j == n:
            raise CaptionParseError("unclosed '['", i)
        if j == i + 1 or raw[j] != "]":
            bad = j if j > i + 1 else i + 1
            raise CaptionParseError("non-numeric index", bad)
        ann_id = int(raw[i + 1:j])
        j += 1
        if j >= n or raw[j] != "<":
            raise CaptionParseError("expected '<' after index", j)
        k = j + 1
        while k < n and raw[k] not in "<>":
            k += 1
        if k == n:
            raise CaptionParseError("unclosed '<'", j)
        if raw[k] == "<":
            raise CaptionParseError("nested '<' in phrase", k)
        if k == j + 1:
            raise CaptionParseError("empty phrase", j)
        parts.append(CaptionEntity(ann_id, raw[j + 1:k], (j + 1, k)))
        i = k + 1
        text_start = i
    if n > text_start:
        parts.append(raw[text_start:])
    return InterleavedCaption(parts)


def serialize_caption(c: InterleavedCaption) -> str:
    out = []
    for p in c.parts:
        if isinstance(p, str):
            bad = [ch for ch in p if ch in _RESERVED]
            if bad:
                raise ValueError(f"text piece {p!r} contains reserved character {bad[0]!r}")
            out.append(p)
        else:
            if not p.phrase:
                raise ValueError(f"entity {p.ann_id} has an empty phrase")
            if "<" in p.phrase or ">" in p.phrase:
                raise ValueError(f"phrase {p.phrase!r} contains '<' or '>'")
            if p.ann_id < 0:
                raise ValueError(f"negative ann_id {p.ann_id}")
            out.append(f"[{p.ann_id}]<{p.phrase}>")
    return "".join(out)
