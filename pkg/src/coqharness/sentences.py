"""Splitting Coq vernacular source into sentences.

A sentence ends at a ``.`` that is followed by whitespace or end of input.
Periods inside string literals, inside (possibly nested) ``(* .. *)``
comments, and inside qualified identifiers such as ``Mod.t`` do not
terminate. Goal-selector bullets (``-``, ``+``, ``*``, repeated) and the
focus braces ``{`` / ``}`` are emitted as single sentences when they occur
where a new sentence could start, even though they carry no period.

Spans are byte offsets into the UTF-8 encoding of the source. Text between
consecutive sentences consists only of whitespace and comments, so joining
sentence texts with the skipped regions reproduces the source exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass


class LexicalError(Exception):
    """Segmentation failure; `offset` is a byte offset into the source."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnterminatedComment(LexicalError):
    def __init__(self, offset: int):
        super().__init__("unterminated comment", offset)


class UnterminatedString(LexicalError):
    def __init__(self, offset: int):
        super().__init__("unterminated string literal", offset)


class UnterminatedSentence(LexicalError):
    """Input ended inside a sentence that never reached its terminator."""

    def __init__(self, offset: int):
        super().__init__("unterminated sentence", offset)


@dataclass(frozen=True)
class Sentence:
    """One vernacular command, terminator included."""

    text: str
    span: tuple[int, int]

    def is_bullet(self) -> bool:
        return bool(re.fullmatch(r"[-+*]+|[{}]", self.text))

    def first_token(self) -> str:
        m = re.match(r"\s*([^\W\d][\w']*)", self.text)
        return m.group(1) if m else self.text[:1]


STATEMENT_KEYWORDS = ("Lemma", "Theorem", "Fact", "Remark", "Corollary", "Proposition")

# Qed./Defined. register a finished proof; Admitted./Abort. close one without.
PROVING_CLOSERS = ("Qed", "Defined")
NON_PROVING_CLOSERS = ("Admitted", "Abort")


def is_statement(sentence: Sentence | str) -> bool:
    text = sentence.text if isinstance(sentence, Sentence) else sentence
    m = re.match(r"\s*([A-Za-z]+)\b", text)
    return bool(m and m.group(1) in STATEMENT_KEYWORDS)


def is_closing(sentence: Sentence | str, proving_only: bool = False) -> bool:
    text = sentence.text if isinstance(sentence, Sentence) else sentence
    m = re.match(r"\s*([A-Za-z]+)\b", text)
    if not m:
        return False
    closers = PROVING_CLOSERS if proving_only else PROVING_CLOSERS + NON_PROVING_CLOSERS
    return m.group(1) in closers


def statement_name(statement: Sentence | str) -> str | None:
    """Name bound by a theorem-like statement, or None."""
    text = statement.text if isinstance(statement, Sentence) else statement
    m = re.match(
        r"\s*(?:%s)\s+([^\W\d][\w']*)" % "|".join(STATEMENT_KEYWORDS), text
    )
    return m.group(1) if m else None


def _byte_offsets(source: str) -> list[int]:
    offsets = [0]
    total = 0
    for ch in source:
        total += len(ch.encode("utf-8"))
        offsets.append(total)
    return offsets


def _skip_string(source: str, i: int) -> int:
    """Advance past the string literal opening at `i`. Quotes escape by doubling."""
    start = i
    i += 1
    n = len(source)
    while i < n:
        if source[i] == '"':
            if i + 1 < n and source[i + 1] == '"':
                i += 2
                continue
            return i + 1
        i += 1
    raise _Unterminated("string", start)


def _skip_comment(source: str, i: int) -> int:
    """Advance past the (possibly nested) comment opening at `i`."""
    start = i
    depth = 0
    n = len(source)
    while i < n:
        if source.startswith("(*", i):
            depth += 1
            i += 2
        elif source.startswith("*)", i):
            depth -= 1
            i += 2
            if depth == 0:
                return i
        else:
            i += 1
    raise _Unterminated("comment", start)


class _Unterminated(Exception):
    def __init__(self, kind: str, char_offset: int):
        self.kind = kind
        self.char_offset = char_offset


def segment_sentences(source: str) -> list[Sentence]:
    """Split `source` into the maximal list of vernacular sentences.

    Raises UnterminatedComment / UnterminatedString / UnterminatedSentence
    (with the byte offset of the offending construct) when the input ends
    inside one.
    """
    offsets = _byte_offsets(source)
    sentences: list[Sentence] = []
    n = len(source)
    i = 0

    def emit(start: int, end: int) -> None:
        sentences.append(Sentence(source[start:end], (offsets[start], offsets[end])))

    try:
        while i < n:
            ch = source[i]
            # Between sentences: whitespace and comments are skipped regions.
            if ch.isspace():
                i += 1
                continue
            if source.startswith("(*", i):
                i = _skip_comment(source, i)
                continue
            if ch in "{}":
                emit(i, i + 1)
                i += 1
                continue
            if ch in "-+*":
                j = i
                while j < n and source[j] == ch:
                    j += 1
                emit(i, j)
                i = j
                continue
            # A regular sentence: scan to its terminating period.
            start = i
            while i < n:
                ch = source[i]
                if ch == '"':
                    i = _skip_string(source, i)
                elif source.startswith("(*", i):
                    i = _skip_comment(source, i)
                elif ch == ".":
                    if i + 1 >= n or source[i + 1].isspace():
                        emit(start, i + 1)
                        i += 1
                        break
                    i += 1
                else:
                    i += 1
            else:
                raise _Unterminated("sentence", start)
    except _Unterminated as exc:
        byte = offsets[exc.char_offset]
        if exc.kind == "comment":
            raise UnterminatedComment(byte) from None
        if exc.kind == "string":
            raise UnterminatedString(byte) from None
        raise UnterminatedSentence(byte) from None

    return sentences


def rejoin(source: str, sentences: list[Sentence]) -> str:
    """Reassemble `source` from sentences plus the skipped regions between them."""
    raw = source.encode("utf-8")
    parts: list[bytes] = []
    pos = 0
    for s in sentences:
        parts.append(raw[pos : s.span[0]])
        parts.append(s.text.encode("utf-8"))
        pos = s.span[1]
    parts.append(raw[pos:])
    return b"".join(parts).decode("utf-8")
