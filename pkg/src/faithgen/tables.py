"""Structured tables, linearization into token sequences, and keyword
extraction for content matching.

A table is an ordered list of (slot type, slot value) records. Linearizing
emits one marker token per row (``<slot_type>``, spaces underscored)
followed by the whitespace tokens of the value, e.g.
``<name_id> willie burden <date_of_birth> july 21 1951``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Optional

from .errors import DataError

if TYPE_CHECKING:  # pragma: no cover
    from .data import Vocab

_PUNCT = (".", ",", "(", ")", "--")

# Tokens ignored by the empty-lexicon text keyword filter.
STOPWORDS = frozenset(
    "a an and are as at be been born but by did for from had has he her "
    "his in is it its not of on or she that the their they this to was "
    "were where which who with also after before during later when while "
    "then so there".split()
)
assert len(STOPWORDS) == 50


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace tokens with listed punctuation split off."""
    s = text.lower()
    for p in _PUNCT:
        s = s.replace(p, f" {p} ")
    return s.split()


def marker_token(slot_type: str) -> str:
    """Single marker token for a slot type: ``<date_of_birth>`` style."""
    return "<" + slot_type.strip().replace(" ", "_") + ">"


def detokenize(tokens: Iterable[str]) -> str:
    """Inverse of tokenize up to spacing: reattach punctuation."""
    s = " ".join(tokens)
    return (s.replace(" ,", ",").replace(" .", ".")
             .replace("( ", "(").replace(" )", ")"))


@dataclass(frozen=True)
class Record:
    slot_type: str
    slot_value: str


@dataclass(frozen=True)
class Table:
    rows: tuple[Record, ...]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "Table":
        return cls(tuple(Record(t, v) for t, v in pairs))

    def __post_init__(self):
        if not self.rows:
            raise DataError("table must have at least one row")
        for k, rec in enumerate(self.rows):
            if not rec.slot_type.strip():
                raise DataError(f"row {k}: empty slot type")
            if not rec.slot_value.strip():
                raise DataError(f"row {k}: empty slot value")


@dataclass(frozen=True)
class LinearizedTable:
    """Token ids plus, per row, the marker index and value index range."""

    tokens: tuple[int, ...]
    slot_spans: tuple[tuple[int, tuple[int, int]], ...]

    def marker_positions(self) -> set[int]:
        return {marker for marker, _ in self.slot_spans}

    def value_positions(self) -> list[int]:
        out = []
        for _, (start, stop) in self.slot_spans:
            out.extend(range(start, stop))
        return out


@dataclass(frozen=True)
class KeywordSet:
    """Token positions (deduplicated by position, not token id)."""

    positions: tuple[int, ...]
    tokens: tuple[int, ...]

    def __len__(self):
        return len(self.positions)


class NounLexicon:
    """Membership set for the noun filter; empty means 'no filtering'."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens = frozenset(t.lower() for t in tokens)

    @classmethod
    def load(cls, path) -> "NounLexicon":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                tokens.append(line)
        return cls(tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._tokens

    def __len__(self) -> int:
        return len(self._tokens)

    def tokens(self) -> list[str]:
        return sorted(self._tokens)


def linearize(table: Table, vocab: "Vocab") -> LinearizedTable:
    """Marker-plus-value token sequence for a table, with slot spans."""
    ids: list[int] = []
    spans: list[tuple[int, tuple[int, int]]] = []
    for rec in table.rows:
        marker_idx = len(ids)
        ids.append(vocab.encode_marker(rec.slot_type))
        value_tokens = tokenize(rec.slot_value)
        start = len(ids)
        ids.extend(vocab.encode(tok) for tok in value_tokens)
        spans.append((marker_idx, (start, len(ids))))
    return LinearizedTable(tuple(ids), tuple(spans))


def extract_keywords(token_ids, source: str, lexicon: NounLexicon,
                     vocab: "Vocab",
                     spans: Optional[tuple] = None) -> KeywordSet:
    """Positions of content keywords in a token sequence.

    For ``source="table"`` only value tokens are considered (marker tokens
    never qualify) and ``spans`` is required. With a non-empty lexicon a
    token qualifies iff its surface form is in the lexicon; with an empty
    lexicon every value token (tables) or non-stopword token (text)
    qualifies.
    """
    if source == "table":
        if spans is None:
            raise DataError("table keyword extraction requires slot spans")
        candidates = []
        for _, (start, stop) in spans:
            candidates.extend(range(start, stop))
    elif source == "text":
        candidates = range(len(token_ids))
    else:
        raise ValueError(f"unknown source {source!r}")

    positions: list[int] = []
    for pos in candidates:
        surface = vocab.decode_one(int(token_ids[pos]))
        if len(lexicon) > 0:
            keep = surface in lexicon
        elif source == "table":
            keep = True
        else:
            keep = surface not in STOPWORDS
        if keep:
            positions.append(pos)
    positions.sort()
    return KeywordSet(tuple(positions),
                      tuple(int(token_ids[p]) for p in positions))


def lexical_items(table: Table, mode: str = "values_only") -> set[str]:
    """All lexical items of a table: value tokens, optionally type tokens."""
    if mode not in ("values_only", "values_and_types"):
        raise ValueError(f"unknown lexical mode {mode!r}")
    items: set[str] = set()
    for rec in table.rows:
        items.update(tokenize(rec.slot_value))
        if mode == "values_and_types":
            items.update(tokenize(rec.slot_type))
    return items
