"""Single executable with subcommands tying the toolkit together.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
JSON results go to stdout; progress and diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields

import numpy as np

from . import metrics as mt
from . import model as mo
from . import training as tr
from .data import Example, SynthConfig, Vocab, load_jsonl, synth_generate
from .errors import DataError, NumericError, UsageError
from .fileio import atomic_write_text
from .matching import OtConfig, match_report
from .tables import NounLexicon, Table


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _threads() -> int:
    raw = os.environ.get("FAITHGEN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"FAITHGEN_THREADS must be an integer, got {raw!r}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(n=args.n, seed=args.seed,
                      hallucination_rate=args.hallucination,
                      omission_rate=args.omission)
    summary = synth_generate(cfg, args.out_dir)
    print(f"wrote {summary['n_train']}/{summary['n_valid']}/"
          f"{summary['n_test']} train/valid/test examples and a "
          f"{summary['lexicon_size']}-token lexicon to {summary['out_dir']}",
          file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_MODEL_FLAGS = ("embed_dim", "factor_dim", "ff_dim", "heads", "blocks",
                "max_len", "dropout", "label_smoothing")


def cmd_train(args) -> int:
    train_kwargs = {}
    model_kwargs = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                blob = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"config is not valid JSON: {exc}") from exc
        train_kwargs.update(blob.get("train", {}))
        model_kwargs.update(blob.get("model", {}))

    # explicit flags win over the config file
    for f in fields(tr.TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            train_kwargs[f.name] = value
    for name in _MODEL_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            model_kwargs[name] = value

    try:
        train_cfg = tr.TrainConfig(**train_kwargs)
    except TypeError as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    profile = model_kwargs.pop("profile", args.profile)
    try:
        if profile == "desk":
            model_cfg = mo.ModelConfig.desk(vocab_size=1, **model_kwargs)
        else:
            model_cfg = mo.ModelConfig(vocab_size=1, **model_kwargs)
    except TypeError as exc:
        raise UsageError(f"bad model config: {exc}") from exc

    examples = load_jsonl(args.train)
    if not examples:
        raise DataError(f"no training examples in {args.train}")
    lexicon = NounLexicon.load(args.nouns) if args.nouns else NounLexicon()
    summary = tr.train(train_cfg, model_cfg, examples, args.out_dir,
                       lexicon=lexicon)
    print(f"trained {summary['steps']} steps ({summary['epochs']} epochs), "
          f"final train perplexity {summary['final_ppl']:.4f}; "
          f"checkpoint at {summary['checkpoint']}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    vocab_path = args.vocab or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), tr.VOCAB_NAME)
    examples = load_jsonl(args.data)
    tables = [ex.table for ex in examples]
    texts = tr.generate_from_checkpoint(args.checkpoint, vocab_path, tables,
                                        beam=args.beam, max_len=args.max_len)
    payload = "\n".join(texts) + ("\n" if texts else "")
    if args.out:
        atomic_write_text(args.out, payload)
        print(f"wrote {len(texts)} generations to {args.out}",
              file=sys.stderr)
    else:
        sys.stdout.write(payload)
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _load_generated(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise DataError(f"cannot read generated texts: {exc}") from exc


def _shard(items: list, n: int) -> list[list]:
    bounds = np.linspace(0, len(items), n + 1).astype(int)
    return [items[bounds[i]:bounds[i + 1]] for i in range(n)
            if bounds[i] < bounds[i + 1]]


def _sharded_report(fn, examples, *aligned) -> mt.MetricReport:
    """Run a per-example metric over worker threads; aggregation is
    deterministic (shards are merged in index order)."""
    workers = _threads()
    if workers == 1 or len(examples) < 2 * workers:
        return fn(examples, *aligned)
    idx_shards = _shard(list(range(len(examples))), workers)
    def run(idxs):
        return fn([examples[i] for i in idxs],
                  *[[a[i] for i in idxs] for a in aligned])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        reports = list(pool.map(run, idx_shards))
    rows = [row for rep in reports for row in rep.per_example]
    keys = [k for k in reports[0].corpus if k != "count"]
    total = sum(rep.corpus["count"] for rep in reports)
    corpus = {k: sum(rep.corpus[k] * rep.corpus["count"] for rep in reports)
              / total for k in keys}
    corpus["count"] = total
    return mt.MetricReport(corpus, rows, sum(r.degenerate for r in reports))


def cmd_evaluate(args) -> int:
    examples = load_jsonl(args.data)
    generated = _load_generated(args.generated)
    if len(generated) != len(examples):
        raise DataError(f"{len(examples)} examples but {len(generated)} "
                        "generated lines")
    if args.metric == "bleu":
        result = mt.bleu4(generated, [ex.text for ex in examples])
        report = {"metric": "bleu", "corpus": result}
    elif args.metric == "parent-t":
        rep = _sharded_report(
            lambda exs, gen: mt.parent_t(exs, gen, args.lexical_mode),
            examples, generated)
        report = {"metric": "parent-t", "corpus": rep.corpus,
                  "degenerate": rep.degenerate}
        if args.per_example:
            report["per_example"] = rep.per_example
    else:
        rep = _sharded_report(
            lambda exs, refs, gen: mt.parent(exs, refs, gen,
                                             args.lexical_mode),
            examples, [ex.text for ex in examples], generated)
        report = {"metric": "parent", "corpus": rep.corpus,
                  "degenerate": rep.degenerate}
        if args.per_example:
            report["per_example"] = rep.per_example
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


# ---------------------------------------------------------------------------
# match
# ---------------------------------------------------------------------------


def _load_tokens(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().split()
    except OSError as exc:
        raise DataError(f"cannot read token file {path}: {exc}") from exc


def _load_embeddings(path) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    dim = None
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read embedding file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            if len(values) != dim or dim == 0:
                raise DataError(f"{path}: line {lineno}: expected token plus "
                                f"{dim} values")
            try:
                table[token] = np.asarray([float(v) for v in values])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    return table


def cmd_match(args) -> int:
    tokens_a = _load_tokens(args.a)
    tokens_b = _load_tokens(args.b)
    embeddings = _load_embeddings(args.embeddings)
    report = match_report(tokens_a, tokens_b, embeddings,
                          OtConfig(beta=args.beta, n_outer=args.iters,
                                   n_inner=args.inner))
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------


def cmd_inspect(args) -> int:
    cfg, params, vocab_hash, step = mo.load_checkpoint(args.checkpoint)
    total = params.total_count()
    emb = mo.embedding_param_count(cfg)
    unfactorized = cfg.vocab_size * cfg.embed_dim
    print(f"checkpoint: {args.checkpoint}")
    print(f"step: {step}")
    print(f"vocab_hash: {vocab_hash}")
    print("config:")
    for key, value in sorted(asdict(cfg).items()):
        print(f"  {key}: {value}")
    print(f"total parameters: {total}")
    print(f"embedding parameters: {emb}")
    if cfg.factorized:
        print(f"unfactorized embedding would be: {unfactorized} "
              f"({unfactorized / emb:.2f}x larger)")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="faithgen",
                     description="Faithful table-to-text generation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", prog="faithgen synth",
                       help="generate a synthetic table-text corpus")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hallucination", type=float, default=0.0)
    p.add_argument("--omission", type=float, default=0.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", prog="faithgen train",
                       help="train a model on a JSONL corpus")
    p.add_argument("--train", required=True, help="training JSONL file")
    p.add_argument("--nouns", help="noun lexicon file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON config file (flags win)")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    for f in fields(tr.TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in ("copy", "factorized", "latent"):
            p.add_argument(flag, action=argparse.BooleanOptionalAction,
                           default=None)
        elif f.name == "ot_mode":
            p.add_argument(flag, choices=("none", "whole", "nouns"),
                           default=None)
        elif f.name == "embedding_source":
            p.add_argument(flag, choices=("top_layer", "embedding_layer"),
                           default=None)
        else:
            p.add_argument(flag, type=type(f.default), default=None)
    for name in _MODEL_FLAGS:
        p.add_argument("--" + name.replace("_", "-"),
                       type=float if name in ("dropout", "label_smoothing")
                       else int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", prog="faithgen generate",
                       help="decode texts for tables with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="vocab file (default: alongside checkpoint)")
    p.add_argument("--data", required=True, help="JSONL file with tables")
    p.add_argument("--out", help="output text file (default: stdout)")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", prog="faithgen evaluate",
                       help="score generated texts against tables")
    p.add_argument("--data", required=True, help="JSONL with tables and references")
    p.add_argument("--generated", required=True, help="one text per line")
    p.add_argument("--metric", choices=("parent-t", "parent", "bleu"),
                   default="parent-t")
    p.add_argument("--lexical-mode", choices=("values_only", "values_and_types"),
                   default="values_only")
    p.add_argument("--per-example", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("match", prog="faithgen match",
                       help="hard / Hungarian / OT matching report")
    p.add_argument("--a", required=True, help="first token list file")
    p.add_argument("--b", required=True, help="second token list file")
    p.add_argument("--embeddings", required=True,
                   help="'token v1 ... vD' per line")
    p.add_argument("--beta", type=float, default=OtConfig().beta)
    p.add_argument("--iters", type=int, default=OtConfig().n_outer)
    p.add_argument("--inner", type=int, default=OtConfig().n_inner)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("inspect", prog="faithgen inspect",
                       help="summarize a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"faithgen: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"faithgen: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"faithgen: data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"faithgen: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
