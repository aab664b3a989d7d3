"""Corpus ingestion, vocabulary, token-budget batching, and a synthetic
biography generator that makes faithfulness claims testable at desk scale.

The synthetic generator injects noise only on the reference side: with
``hallucination_rate`` a sentence mentions an entity that is not in the
table, and with ``omission_rate`` one table row goes unmentioned. Tables
stay clean in both cases.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DataError
from .fileio import atomic_write_text
from .tables import (KeywordSet, LinearizedTable, NounLexicon, Record, Table,
                     extract_keywords, linearize, marker_token, tokenize)

PAD, BOS, EOS, UNK, UNK_TYPE = range(5)
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>", "<unk_type>")


class Vocab:
    """Dense id<->token maps; specials occupy the lowest ids, then one
    marker id per slot type, then frequency-ranked regular tokens."""

    def __init__(self, tokens: list[str], counts: list[int], n_markers: int):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocab must start with the special tokens")
        if len(tokens) != len(set(tokens)):
            raise DataError("vocab contains duplicate tokens")
        self._tokens = list(tokens)
        self._counts = list(counts)
        self._n_markers = n_markers
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def n_markers(self) -> int:
        return self._n_markers

    def marker_ids(self) -> range:
        return range(len(SPECIALS), len(SPECIALS) + self._n_markers)

    def is_marker(self, idx: int) -> bool:
        return idx in self.marker_ids() or idx == UNK_TYPE

    def encode(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def encode_marker(self, slot_type: str) -> int:
        idx = self._ids.get(marker_token(slot_type), UNK_TYPE)
        return idx if self.is_marker(idx) else UNK_TYPE

    def decode_one(self, idx: int) -> str:
        return self._tokens[idx]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if skip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self._tokens[i])
        return out

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self._tokens).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        buf = io.StringIO()
        for tok, cnt in zip(self._tokens, self._counts):
            buf.write(f"{tok}\t{cnt}\n")
        atomic_write_text(path, buf.getvalue())

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}: line {lineno}: expected token<TAB>count")
                tokens.append(parts[0])
                counts.append(int(parts[1]))
        n_markers = 0
        for tok in tokens[len(SPECIALS):]:
            if tok.startswith("<") and tok.endswith(">"):
                n_markers += 1
            else:
                break
        return cls(tokens, counts, n_markers)


@dataclass
class Example:
    table: Table
    text: str
    keywords: Optional[list[str]] = None

    def __post_init__(self):
        if not self.text.strip():
            raise DataError("example text must be non-empty")
        if self.keywords is not None:
            valid = set(tokenize(self.text))
            for rec in self.table.rows:
                valid.update(tokenize(rec.slot_value))
            for kw in self.keywords:
                if kw.lower() not in valid:
                    raise DataError(f"keyword {kw!r} not present in text or table")


def load_jsonl(path) -> list[Example]:
    """Order-preserving JSONL parse; fails fast with the offending line."""
    examples: list[Example] = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            examples.append(_parse_example(obj, path, lineno))
    return examples


def _parse_example(obj, path, lineno) -> Example:
    where = f"{path}: line {lineno}"
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected an object")
    if "table" not in obj or not isinstance(obj["table"], list) or not obj["table"]:
        raise DataError(f"{where}: missing or empty 'table'")
    if "text" not in obj or not isinstance(obj["text"], str):
        raise DataError(f"{where}: missing 'text'")
    rows = []
    for k, entry in enumerate(obj["table"]):
        if not isinstance(entry, dict) or "type" not in entry or "value" not in entry:
            raise DataError(f"{where}: table row {k} needs 'type' and 'value'")
        rows.append((str(entry["type"]), str(entry["value"])))
    keywords = obj.get("keywords")
    if keywords is not None and (not isinstance(keywords, list)
                                 or any(not isinstance(k, str) for k in keywords)):
        raise DataError(f"{where}: 'keywords' must be a list of strings")
    try:
        return Example(Table.from_pairs(rows), obj["text"], keywords)
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from exc


def save_jsonl(path, examples: Iterable[Example]) -> None:
    buf = io.StringIO()
    for ex in examples:
        obj = {
            "table": [{"type": r.slot_type, "value": r.slot_value}
                      for r in ex.table.rows],
            "text": ex.text,
        }
        if ex.keywords is not None:
            obj["keywords"] = ex.keywords
        buf.write(json.dumps(obj, ensure_ascii=False) + "\n")
    atomic_write_text(path, buf.getvalue())


def build_vocab(examples: list[Example], cap: int = 50000) -> Vocab:
    """Frequency-ranked vocabulary (ties broken lexicographically) under a
    size cap; slot-type markers are always included."""
    counts: Counter[str] = Counter()
    markers: Counter[str] = Counter()
    for ex in examples:
        for rec in ex.table.rows:
            markers[marker_token(rec.slot_type)] += 1
            counts.update(tokenize(rec.slot_value))
        counts.update(tokenize(ex.text))
    marker_list = sorted(markers)
    floor = len(SPECIALS) + len(marker_list)
    if cap < floor:
        raise DataError(f"vocab cap {cap} below {floor} (specials + markers)")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    room = cap - floor
    kept = ranked[:room]
    tokens = list(SPECIALS) + marker_list + [t for t, _ in kept]
    out_counts = ([0] * len(SPECIALS) + [markers[m] for m in marker_list]
                  + [c for _, c in kept])
    return Vocab(tokens, out_counts, len(marker_list))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class EncodedExample:
    example: Example
    src: np.ndarray            # linearized table ids
    tgt: np.ndarray            # text ids (no bos/eos)
    spans: tuple
    src_kw: np.ndarray         # bool over src positions
    tgt_kw: np.ndarray         # bool over tgt positions

    @property
    def length(self) -> int:
        return len(self.src) + len(self.tgt) + 1


@dataclass
class Batch:
    src: np.ndarray            # (B, S) int64, padded
    src_mask: np.ndarray       # (B, S) float, 1 on real tokens
    src_len: np.ndarray
    tgt_in: np.ndarray         # (B, T): bos + tokens
    tgt_out: np.ndarray        # (B, T): tokens + eos
    tgt_mask: np.ndarray       # (B, T) float over tgt_out positions
    tgt_len: np.ndarray        # real token count incl. eos
    src_kw_mask: np.ndarray    # (B, S) bool
    tgt_kw_mask: np.ndarray    # (B, T) bool over tgt_out positions
    rows: list[EncodedExample]

    @property
    def size(self) -> int:
        return self.src.shape[0]


def encode_example(ex: Example, vocab: Vocab,
                   lexicon: Optional[NounLexicon] = None) -> EncodedExample:
    lexicon = lexicon if lexicon is not None else NounLexicon()
    lin = linearize(ex.table, vocab)
    src = np.asarray(lin.tokens, dtype=np.int64)
    tgt_tokens = tokenize(ex.text)
    tgt = np.asarray([vocab.encode(t) for t in tgt_tokens], dtype=np.int64)
    src_kw = np.zeros(len(src), dtype=bool)
    kws = extract_keywords(lin.tokens, "table", lexicon, vocab, lin.slot_spans)
    src_kw[list(kws.positions)] = True
    tgt_kw = np.zeros(len(tgt), dtype=bool)
    kwt = extract_keywords(tgt, "text", lexicon, vocab)
    tgt_kw[list(kwt.positions)] = True
    return EncodedExample(ex, src, tgt, lin.slot_spans, src_kw, tgt_kw)


def make_batch(rows: list[EncodedExample]) -> Batch:
    b = len(rows)
    s = max(len(r.src) for r in rows)
    t = max(len(r.tgt) for r in rows) + 1   # room for bos/eos shift
    src = np.full((b, s), PAD, dtype=np.int64)
    src_mask = np.zeros((b, s))
    tgt_in = np.full((b, t), PAD, dtype=np.int64)
    tgt_out = np.full((b, t), PAD, dtype=np.int64)
    tgt_mask = np.zeros((b, t))
    src_kw = np.zeros((b, s), dtype=bool)
    tgt_kw = np.zeros((b, t), dtype=bool)
    src_len = np.zeros(b, dtype=np.int64)
    tgt_len = np.zeros(b, dtype=np.int64)
    for k, r in enumerate(rows):
        ns, nt = len(r.src), len(r.tgt)
        src[k, :ns] = r.src
        src_mask[k, :ns] = 1.0
        src_kw[k, :ns] = r.src_kw
        tgt_in[k, 0] = BOS
        tgt_in[k, 1:nt + 1] = r.tgt
        tgt_out[k, :nt] = r.tgt
        tgt_out[k, nt] = EOS
        tgt_mask[k, :nt + 1] = 1.0
        tgt_kw[k, :nt] = r.tgt_kw
        src_len[k] = ns
        tgt_len[k] = nt + 1
    return Batch(src, src_mask, src_len, tgt_in, tgt_out, tgt_mask, tgt_len,
                 src_kw, tgt_kw, rows)


def batch_iterator(examples: list[Example], vocab: Vocab, token_budget: int,
                   shuffle_seed: int,
                   lexicon: Optional[NounLexicon] = None) -> list[Batch]:
    """Length-bucketed batches whose padded token count stays within the
    budget; the sequence is deterministic given the seed."""
    if not examples:
        return []
    encoded = [encode_example(ex, vocab, lexicon) for ex in examples]
    longest = max(e.length for e in encoded)
    if longest > token_budget:
        raise DataError(f"example of length {longest} exceeds token budget "
                        f"{token_budget}")
    rng = np.random.default_rng(shuffle_seed)
    jitter = rng.random(len(encoded))
    order = sorted(range(len(encoded)),
                   key=lambda i: (encoded[i].length, jitter[i]))
    batches: list[Batch] = []
    current: list[EncodedExample] = []
    max_s = max_t = 0
    for idx in order:
        e = encoded[idx]
        ns, nt = len(e.src), len(e.tgt) + 1
        new_s, new_t = max(max_s, ns), max(max_t, nt)
        if current and (len(current) + 1) * (new_s + new_t) > token_budget:
            batches.append(make_batch(current))
            current, max_s, max_t = [], 0, 0
            new_s, new_t = ns, nt
        current.append(e)
        max_s, max_t = new_s, new_t
    if current:
        batches.append(make_batch(current))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

FIRST_NAMES = (
    "maria james elena kofi ingrid tomas aisha viktor noor pablo greta "
    "samuel yuki dario fatima leon priya marco sofia emil hana oscar lena "
    "ravi clara felix amara joren petra nils rosa ivan mira carl zelda "
    "omar lucia stefan talia hugo").split()
LAST_NAMES = (
    "burden okafor lindqvist marchetti osei kowalski tanaka fernandez "
    "bergstrom haddad novak whitfield abara castell jensen moreau krishnan "
    "silva brandt okoye farrell vasquez holm adeyemi caruso nilsson duarte "
    "mensah petrov langley sorenson ramos ferreira kovacs antonsson weiss "
    "delacroix ibrahim stroud quennell").split()
MONTHS = ("january february march april may june july august september "
          "october november december").split()
DAYS = tuple(str(d) for d in range(1, 29))
YEARS = tuple(str(y) for y in range(1950, 1990))
CITIES = ("portland salem eugene bozeman laramie fresno tucson wichita "
          "topeka fargo duluth peoria savannah tulsa reno boise omaha "
          "dayton flint macon provo chico tempe yuma").split()
REGIONS = ("oregon montana wyoming california arizona kansas dakota "
           "minnesota georgia nevada idaho ohio").split()
OCCUPATIONS = ("engineer sculptor botanist journalist architect chemist "
               "violinist historian surgeon cartographer novelist geologist "
               "pilot linguist astronomer photographer").split()
TEAM_TOWNS = ("amherst brockton camden dover easton fairfield granville "
              "hartley ithaca jasper keene lowell").split()
TEAM_NICKS = ("harriers rovers wanderers pioneers voyagers comets falcons "
              "foxes wolves herons badgers otters").split()
AWARD_ADJS = ("golden silver bronze national regional coastal northern "
              "southern eastern western").split()
AWARD_NOUNS = "medal trophy ribbon prize laurel cup".split()
HALL_CITIES = ("kelowna windsor halifax sudbury nanaimo gander moncton "
               "kamloops yellowknife whitehorse").split()
HALL_REGIONS = "ontario quebec yukon manitoba alberta saskatchewan".split()
HALL_PARTNERS = ("beatrice cornelius dorothea ferdinand genevieve horatio "
                 "isadora leopold millicent percival rosalind theodore").split()

_OMITTABLE = ("date of birth", "place of birth", "occupation", "team", "award")


@dataclass
class SynthConfig:
    n: int = 500
    seed: int = 0
    schema: str = "biography"
    hallucination_rate: float = 0.0
    omission_rate: float = 0.0

    def validate(self) -> None:
        if self.n < 10:
            raise ValueError("n must be at least 10")
        if not (0.0 <= self.hallucination_rate <= 1.0):
            raise ValueError("hallucination_rate must be in [0, 1]")
        if not (0.0 <= self.omission_rate <= 1.0):
            raise ValueError("omission_rate must be in [0, 1]")
        if self.schema != "biography":
            raise ValueError(f"unknown schema {self.schema!r}")


def entity_lexicon_tokens() -> list[str]:
    """Every entity token the generator can emit (the noun lexicon)."""
    tokens: set[str] = set()
    for pool in (FIRST_NAMES, LAST_NAMES, MONTHS, DAYS, YEARS, CITIES,
                 REGIONS, OCCUPATIONS, TEAM_TOWNS, TEAM_NICKS, AWARD_ADJS,
                 AWARD_NOUNS, HALL_CITIES, HALL_REGIONS, HALL_PARTNERS):
        tokens.update(pool)
    return sorted(tokens)


def _render(words: list[str]) -> str:
    return " ".join(words).replace(" ,", ",").replace(" .", ".")


def _other(rng: np.random.Generator, pool, taken: str) -> str:
    """A pool entry different from ``taken``."""
    while True:
        candidate = str(rng.choice(pool))
        if candidate != taken:
            return candidate


def _synth_example(rng: np.random.Generator, cfg: SynthConfig) -> Example:
    first = str(rng.choice(FIRST_NAMES))
    last = str(rng.choice(LAST_NAMES))
    month = str(rng.choice(MONTHS))
    day = str(rng.choice(DAYS))
    year = str(rng.choice(YEARS))
    city = str(rng.choice(CITIES))
    region = str(rng.choice(REGIONS))
    occupation = str(rng.choice(OCCUPATIONS))
    team_town = str(rng.choice(TEAM_TOWNS))
    team_nick = str(rng.choice(TEAM_NICKS))
    award_adj = str(rng.choice(AWARD_ADJS))
    award_noun = str(rng.choice(AWARD_NOUNS))

    table = Table.from_pairs([
        ("name", f"{first} {last}"),
        ("date of birth", f"{month} {day} {year}"),
        ("place of birth", f"{city} {region}"),
        ("occupation", occupation),
        ("team", f"{team_town} {team_nick}"),
        ("award", f"{award_adj} {award_noun}"),
    ])

    omitted = None
    if rng.random() < cfg.omission_rate:
        omitted = _OMITTABLE[int(rng.integers(len(_OMITTABLE)))]

    # Reference-side hallucination: one sentence mentions an entity that is
    # not in the table (a corrupted mention in a regular sentence frame).
    corrupted = None
    if rng.random() < cfg.hallucination_rate:
        candidates = [row for row in _OMITTABLE if row != omitted]
        corrupted = candidates[int(rng.integers(len(candidates)))]
    if corrupted == "date of birth":
        month_m, day_m = _other(rng, MONTHS, month), _other(rng, DAYS, day)
        year_m = _other(rng, YEARS, year)
    else:
        month_m, day_m, year_m = month, day, year
    city_m = _other(rng, CITIES, city) if corrupted == "place of birth" else city
    region_m = (_other(rng, REGIONS, region)
                if corrupted == "place of birth" else region)
    occupation_m = (_other(rng, OCCUPATIONS, occupation)
                    if corrupted == "occupation" else occupation)
    town_m = _other(rng, TEAM_TOWNS, team_town) if corrupted == "team" else team_town
    nick_m = _other(rng, TEAM_NICKS, team_nick) if corrupted == "team" else team_nick
    adj_m = _other(rng, AWARD_ADJS, award_adj) if corrupted == "award" else award_adj
    noun_m = _other(rng, AWARD_NOUNS, award_noun) if corrupted == "award" else award_noun

    pick = lambda options: options[int(rng.integers(len(options)))]
    sentences: list[str] = []
    if omitted == "date of birth":
        sentences.append(_render([first, last, "lived", "a", "quiet", "life", "."]))
    else:
        sentences.append(_render(
            [first, last, "was", "born", "on", month_m, day_m, ",", year_m, "."]))
    if omitted != "place of birth":
        verb = pick([["grew", "up", "in"], ["was", "raised", "in"]])
        sentences.append(_render([first, *verb, city_m, region_m, "."]))
    if omitted != "occupation":
        verb = pick([["worked", "as", "a"], ["spent", "years", "as", "a"]])
        sentences.append(_render([first, *verb, occupation_m, "."]))
    if omitted != "team":
        verb = pick([["played", "for", "the"], ["spent", "a", "season", "with", "the"]])
        sentences.append(_render([first, *verb, town_m, nick_m, "."]))
    if omitted != "award":
        verb = pick([["won", "the"], ["received", "the"]])
        sentences.append(_render([first, *verb, adj_m, noun_m, "."]))

    text = " ".join(sentences)
    lexicon = set(entity_lexicon_tokens())
    keywords = sorted(set(tokenize(text)) & lexicon)
    return Example(table, text, keywords)


def synth_generate(cfg: SynthConfig, out_dir) -> dict:
    """Write train/valid/test JSONL splits plus the noun lexicon.

    Deterministic given the seed; returns a summary of what was written.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    examples = [_synth_example(rng, cfg) for _ in range(cfg.n)]
    n_valid = max(1, round(cfg.n * 0.1))
    n_test = max(1, round(cfg.n * 0.1))
    n_train = cfg.n - n_valid - n_test
    splits = {
        "train.jsonl": examples[:n_train],
        "valid.jsonl": examples[n_train:n_train + n_valid],
        "test.jsonl": examples[n_train + n_valid:],
    }
    os.makedirs(out_dir, exist_ok=True)
    for name, split in splits.items():
        save_jsonl(os.path.join(out_dir, name), split)
    lexicon_lines = ["# synthetic biography noun lexicon"]
    lexicon_lines += entity_lexicon_tokens()
    atomic_write_text(os.path.join(out_dir, "nouns.txt"),
                      "\n".join(lexicon_lines) + "\n")
    return {
        "n_train": n_train,
        "n_valid": n_valid,
        "n_test": n_test,
        "lexicon_size": len(entity_lexicon_tokens()),
        "out_dir": os.fspath(out_dir),
    }
