"""Faithfulness metrics: PARENT-T, a word-overlap PARENT variant, BLEU-4.

PARENT-T scores a generated text against its table alone: precision is a
geometric mean over n-gram orders 1-4 of entailed precision (fraction of
each n-gram's tokens found among the table's lexical items), and recall
averages, per record, the longest-common-subsequence coverage of the
record's value string by the text.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import DataError
from .tables import Table, lexical_items, tokenize

_PRECISION_FLOOR = 1e-9
_MAX_ORDER = 4


def ngrams(tokens: Sequence[str], order: int) -> Counter:
    return Counter(tuple(tokens[i:i + order])
                   for i in range(len(tokens) - order + 1))


def ngram_entailment(gram: Sequence[str], table_lexical: set[str]) -> float:
    """Fraction of the n-gram's tokens present among the table's items."""
    if not gram:
        raise ValueError("empty n-gram")
    return sum(1 for tok in gram if tok in table_lexical) / len(gram)


def lcs(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common subsequence (standard DP)."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def parent_t_precision(text_tokens: Sequence[str], table_lexical: set[str]
                       ) -> tuple[float, list[Optional[float]]]:
    """(E_p, per-order precisions). Orders longer than the text are
    excluded from the geometric mean; zero precisions are floored at 1e-9
    inside the log."""
    if not text_tokens:
        raise DataError("precision of empty text is undefined")
    per_order: list[Optional[float]] = []
    logs = []
    for order in range(1, _MAX_ORDER + 1):
        grams = ngrams(text_tokens, order)
        total = sum(grams.values())
        if total == 0:
            per_order.append(None)
            continue
        entailed = sum(ngram_entailment(g, table_lexical) * c
                       for g, c in grams.items())
        p = entailed / total
        per_order.append(p)
        logs.append(math.log(max(p, _PRECISION_FLOOR)))
    e_p = math.exp(sum(logs) / len(logs))
    return e_p, per_order


def parent_t_recall(table: Table, text_tokens: Sequence[str]) -> float:
    """Mean per-record LCS coverage of value strings by the text."""
    total = 0.0
    for rec in table.rows:
        value_tokens = tokenize(rec.slot_value)
        total += lcs(value_tokens, text_tokens) / len(value_tokens)
    return total / len(table.rows)


def f_score(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class MetricReport:
    corpus: dict
    per_example: list[dict] = field(default_factory=list)
    degenerate: int = 0


def parent_t(examples, generated_texts: Sequence[str],
             lexical_mode: str = "values_only") -> MetricReport:
    """Corpus PARENT-T: instance F scores averaged arithmetically."""
    if len(examples) != len(generated_texts):
        raise DataError(f"{len(examples)} examples vs {len(generated_texts)} "
                        "generated texts")
    rows = []
    degenerate = 0
    for ex, text in zip(examples, generated_texts):
        tokens = tokenize(text)
        table_lex = lexical_items(ex.table, lexical_mode)
        if not tokens:
            degenerate += 1
            rows.append({"e_p": 0.0, "e_r": 0.0, "f": 0.0,
                         "orders": [None] * _MAX_ORDER})
            continue
        e_p, orders = parent_t_precision(tokens, table_lex)
        e_r = parent_t_recall(ex.table, tokens)
        f = f_score(e_p, e_r)
        if f == 0.0:
            degenerate += 1
        rows.append({"e_p": e_p, "e_r": e_r, "f": f, "orders": orders})
    corpus = {
        "precision": _mean(r["e_p"] for r in rows),
        "recall": _mean(r["e_r"] for r in rows),
        "f": _mean(r["f"] for r in rows),
        "count": len(rows),
    }
    return MetricReport(corpus, rows, degenerate)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def parent(examples, references: Sequence[str], generated: Sequence[str],
           lexical_mode: str = "values_only") -> MetricReport:
    """Word-overlap PARENT: precision entails each candidate n-gram against
    the reference n-grams united with table items (w = max of the reference
    indicator and the table overlap fraction); recall geometrically mixes
    plain n-gram reference recall with PARENT-T table recall at weight 0.5.
    """
    if not (len(examples) == len(references) == len(generated)):
        raise DataError("examples, references, and generated texts must align")
    rows = []
    degenerate = 0
    for ex, ref, gen in zip(examples, references, generated):
        gen_tokens = tokenize(gen)
        ref_tokens = tokenize(ref)
        table_lex = lexical_items(ex.table, lexical_mode)
        if not gen_tokens or not ref_tokens:
            degenerate += 1
            rows.append({"precision": 0.0, "recall": 0.0, "f": 0.0})
            continue
        logs_p, logs_r = [], []
        for order in range(1, _MAX_ORDER + 1):
            gen_grams = ngrams(gen_tokens, order)
            ref_grams = ngrams(ref_tokens, order)
            total = sum(gen_grams.values())
            if total > 0:
                entailed = sum(
                    max(1.0 if g in ref_grams else 0.0,
                        ngram_entailment(g, table_lex)) * c
                    for g, c in gen_grams.items())
                logs_p.append(math.log(max(entailed / total, _PRECISION_FLOOR)))
            ref_total = sum(ref_grams.values())
            if ref_total > 0:
                hit = sum(min(c, gen_grams.get(g, 0))
                          for g, c in ref_grams.items())
                logs_r.append(math.log(max(hit / ref_total, _PRECISION_FLOOR)))
        precision = math.exp(sum(logs_p) / len(logs_p)) if logs_p else 0.0
        ref_recall = math.exp(sum(logs_r) / len(logs_r)) if logs_r else 0.0
        table_recall = parent_t_recall(ex.table, gen_tokens)
        recall = math.sqrt(ref_recall * table_recall)
        f = f_score(precision, recall)
        if f == 0.0:
            degenerate += 1
        rows.append({"precision": precision, "recall": recall, "f": f,
                     "table_recall": table_recall})
    corpus = {
        "precision": _mean(r["precision"] for r in rows),
        "recall": _mean(r["recall"] for r in rows),
        "f": _mean(r["f"] for r in rows),
        "count": len(rows),
    }
    return MetricReport(corpus, rows, degenerate)


def bleu4(candidates: Sequence[str], references: Sequence[str]) -> dict:
    """Corpus BLEU-4 with brevity penalty and add-1 smoothing on orders
    with zero matches (single reference per candidate)."""
    if not candidates:
        raise DataError("bleu requires at least one candidate")
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates vs {len(references)} "
                        "references")
    cand_tokens = [tokenize(c) for c in candidates]
    ref_tokens = [tokenize(r) for r in references]
    cand_len = sum(len(t) for t in cand_tokens)
    ref_len = sum(len(t) for t in ref_tokens)
    if cand_len == 0:
        return {"bleu": 0.0, "precisions": [0.0] * _MAX_ORDER,
                "brevity_penalty": 0.0, "candidate_length": 0,
                "reference_length": ref_len}
    precisions = []
    for order in range(1, _MAX_ORDER + 1):
        matched = total = 0
        for cand, ref in zip(cand_tokens, ref_tokens):
            c_grams = ngrams(cand, order)
            r_grams = ngrams(ref, order)
            total += sum(c_grams.values())
            matched += sum(min(c, r_grams.get(g, 0)) for g, c in c_grams.items())
        if matched == 0:
            precisions.append((matched + 1.0) / (total + 1.0))
        else:
            precisions.append(matched / total)
    bp = math.exp(1.0 - ref_len / cand_len) if cand_len < ref_len else 1.0
    score = bp * math.exp(sum(math.log(p) for p in precisions) / _MAX_ORDER)
    return {
        "bleu": score,
        "precisions": precisions,
        "brevity_penalty": bp,
        "candidate_length": cand_len,
        "reference_length": ref_len,
    }
