"""End-to-end optimization: Adam, the two-phase OT schedule, checkpointing,
and ablation toggles (copy / factorization / OT mode / latent loss).

Phase one trains with likelihood (plus the disagreement term when the
latent flag is on); from ``ot_start_step`` the OT content-matching term is
added, with the text side produced by noun-filtered soft-argmax decoding.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import losses as lo
from . import model as mo
from .data import (BOS, EOS, PAD, UNK, UNK_TYPE, Batch, Example, Vocab,
                   batch_iterator, build_vocab)
from .errors import DataError, NumericError
from .fileio import atomic_write_text
from .matching import OtConfig
from .tables import NounLexicon, STOPWORDS, Table, detokenize, linearize

LOG_NAME = "train_log.jsonl"
VOCAB_NAME = "vocab.tsv"
FINAL_CHECKPOINT = "checkpoint_final.bin"


@dataclass
class TrainConfig:
    lr: float = 1e-5             # flat rate, no warmup by default
    beta1: float = 0.9           # artifact default; only beta2 is published
    beta2: float = 0.998
    eps: float = 1e-9
    max_steps: int = 30000
    ot_start_step: int = 20000   # two-phase schedule: OT joins here
    lam: float = 0.1
    gamma: float = 0.1
    seed: int = 0
    checkpoint_every: int = 1000
    token_budget: int = 4096
    vocab_cap: int = 50000
    grad_clip: float = 0.0       # 0 disables
    warmup_steps: int = 0        # 0 disables
    copy: bool = True
    factorized: bool = True
    ot_mode: str = "nouns"       # none | whole | nouns
    latent: bool = True
    embedding_source: str = "top_layer"
    soft_temperature: float = 0.1
    ot_beta: float = 0.5
    ot_outer: int = 60           # lighter than the solver default: the plan
    ot_inner: int = 1            # is frozen, training needs no 1e-4 marginals
    ot_max_len: int = 48         # soft-decode length cap for the OT pass

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.ot_start_step > self.max_steps:
            raise ValueError("ot_start_step must not exceed max_steps")
        if self.ot_mode not in ("none", "whole", "nouns"):
            raise ValueError(f"unknown ot_mode {self.ot_mode!r}")
        if self.soft_temperature <= 0:
            raise ValueError("soft_temperature must be positive")
        lo.LossWeights(self.lam, self.gamma, self.ot_start_step,
                       self.embedding_source).validate()


class AdamState:
    """First/second moment buffers per parameter plus the step counter."""

    def __init__(self, params: mo.ParamSet):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0


def adam_step(params: mo.ParamSet, state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update from the gradients stored on params."""
    state.t += 1
    lr = cfg.lr
    if cfg.warmup_steps > 0 and state.t <= cfg.warmup_steps:
        lr = cfg.lr * state.t / cfg.warmup_steps
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, tensor in params.items():
        grad = tensor.grad
        if grad is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad * grad
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        tensor.data -= lr * update


def global_grad_norm(params: mo.ParamSet) -> float:
    total = 0.0
    for _, tensor in params.items():
        if tensor.grad is not None:
            total += float((tensor.grad * tensor.grad).sum())
    return float(np.sqrt(total))


def clip_grads(params: mo.ParamSet, max_norm: float) -> None:
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, tensor in params.items():
            if tensor.grad is not None:
                tensor.grad *= scale


def _grads_finite(params: mo.ParamSet) -> bool:
    for _, tensor in params.items():
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            return False
    return True


def _vocab_masks(vocab: Vocab, lexicon: NounLexicon):
    """Per-id eligibility for the OT text filter (nouns, whole)."""
    size = len(vocab)
    marker = np.zeros(size, dtype=bool)
    for i in vocab.marker_ids():
        marker[i] = True
    marker[UNK_TYPE] = True
    special = np.zeros(size, dtype=bool)
    special[[PAD, BOS, EOS, UNK, UNK_TYPE]] = True
    whole_ok = ~(marker | special)
    noun_ok = np.zeros(size, dtype=bool)
    for i in range(size):
        if marker[i] or special[i]:
            continue
        surface = vocab.decode_one(i)
        if len(lexicon) > 0:
            noun_ok[i] = surface in lexicon
        else:
            noun_ok[i] = surface not in STOPWORDS
    return noun_ok, whole_ok, marker


_N_SPECIALS = 5


def _table_side_mask(batch: Batch, marker: np.ndarray, mode: str) -> np.ndarray:
    if mode == "nouns":
        return batch.src_kw_mask
    value = (batch.src_mask > 0) & ~marker[batch.src]
    value &= batch.src >= _N_SPECIALS
    return value


def _ot_term(model_cfg: mo.ModelConfig, params: mo.ParamSet, cfg: TrainConfig,
             batch: Batch, composed, memory, noun_ok, whole_ok, marker,
             rng) -> tuple:
    """Batch OT loss: soft-decode the text side, filter both sides, average
    per-example transport costs. Returns (loss tensor | None, skipped)."""
    text_ok = noun_ok if cfg.ot_mode == "nouns" else whole_ok
    table_mask = _table_side_mask(batch, marker, cfg.ot_mode)
    length = int(min(cfg.ot_max_len, batch.tgt_in.shape[1]))
    soft, argmax_ids = mo.soft_decode(
        model_cfg, params, batch.src, length,
        temperature=cfg.soft_temperature, train=True, rng=rng,
        composed=composed, memory=memory, src_mask=batch.src_mask)
    ot_cfg = OtConfig(cfg.ot_beta, cfg.ot_outer, cfg.ot_inner)
    terms = []
    skipped = 0
    for e in range(batch.size):
        table_ids = batch.src[e][table_mask[e]]
        text_len = min(length, int(batch.tgt_len[e]) - 1)
        steps = [t for t in range(text_len) if text_ok[argmax_ids[e, t]]]
        if len(table_ids) == 0 or not steps:
            skipped += 1
            continue
        tab = mo.compose_embedding(model_cfg, params, table_ids)
        row = ad.reshape(ad.slice_axis(soft, 0, e, e + 1),
                         (length, model_cfg.embed_dim))
        txt = ad.embedding(row, np.asarray(steps, dtype=np.int64))
        term, _ = lo.ot_loss(tab, txt, ot_cfg)
        terms.append(term)
    if not terms:
        return None, skipped
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / len(terms)), skipped


def _disagreement_term(cfg: TrainConfig, model_cfg, params, batch, composed,
                       memory, hidden):
    if cfg.embedding_source == "top_layer":
        return lo.disagreement_loss(memory, hidden, batch.src_mask,
                                    batch.tgt_mask)
    table_emb = ad.embedding(composed, batch.src)
    text_emb = ad.embedding(composed, batch.tgt_out)
    return lo.disagreement_loss(table_emb, text_emb, batch.src_mask,
                                batch.tgt_mask)


def _forward_batch(model_cfg, params, batch, train, rng, composed=None):
    composed = composed if composed is not None else \
        mo.composed_embedding(model_cfg, params)
    memory = mo.encode(model_cfg, params, batch.src, batch.src_mask,
                       train=train, rng=rng, composed=composed)
    hidden, p_att = mo.decoder_forward(model_cfg, params, composed, memory,
                                       batch.src_mask, batch.tgt_in,
                                       train=train, rng=rng)
    onehot = mo.source_onehot(batch.src, batch.src_mask,
                              model_cfg.vocab_size) \
        if model_cfg.copy_enabled else None
    dist = mo.output_distribution(model_cfg, params, composed, hidden,
                                  p_att, onehot)
    return composed, memory, hidden, dist


def train(cfg: TrainConfig, model_cfg: mo.ModelConfig,
          train_examples: list[Example], out_dir,
          vocab: Vocab | None = None,
          lexicon: NounLexicon | None = None) -> dict:
    """Run the optimization loop; writes vocab, config, JSONL loss log, and
    checkpoints into ``out_dir``. Fully deterministic given the seed."""
    cfg.validate()
    if not train_examples:
        raise DataError("no training examples")
    os.makedirs(out_dir, exist_ok=True)
    lexicon = lexicon if lexicon is not None else NounLexicon()
    if vocab is None:
        vocab = build_vocab(train_examples, cfg.vocab_cap)
    model_cfg = replace(model_cfg, vocab_size=len(vocab),
                        copy_enabled=cfg.copy, factorized=cfg.factorized)
    model_cfg.validate()
    vocab.save(os.path.join(out_dir, VOCAB_NAME))
    atomic_write_text(os.path.join(out_dir, "config.json"), json.dumps(
        {"train": asdict(cfg), "model": asdict(model_cfg)},
        sort_keys=True, indent=2) + "\n")

    params = mo.init_params(model_cfg, cfg.seed)
    adam = AdamState(params)
    dropout_rng = np.random.default_rng([cfg.seed, 7])
    noun_ok, whole_ok, marker = _vocab_masks(vocab, lexicon)
    weights = lo.LossWeights(cfg.lam, cfg.gamma, cfg.ot_start_step,
                             cfg.embedding_source)
    vocab_hash = vocab.content_hash()

    log_lines: list[str] = []
    skipped_steps = 0
    epoch = 0
    batches: list[Batch] = []
    cursor = 0
    step = 0
    while step < cfg.max_steps:
        if cursor >= len(batches):
            batches = batch_iterator(train_examples, vocab, cfg.token_budget,
                                     cfg.seed * 100003 + epoch, lexicon)
            cursor = 0
            epoch += 1
        batch = batches[cursor]
        cursor += 1

        params.zero_grads()
        with ad.ComputeGraph() as graph:
            composed, memory, hidden, dist = _forward_batch(
                model_cfg, params, batch, True, dropout_rng)
            mle = lo.mle_loss(dist["p_final"], batch.tgt_out, batch.tgt_mask,
                              model_cfg.label_smoothing)
            nll, tokens = lo.nll_and_tokens(dist["p_final"].data,
                                            batch.tgt_out, batch.tgt_mask)
            disagree = _disagreement_term(cfg, model_cfg, params, batch,
                                          composed, memory, hidden) \
                if cfg.latent else None
            ot_term = None
            ot_skipped = 0
            if cfg.ot_mode != "none" and cfg.gamma > 0 \
                    and step >= cfg.ot_start_step:
                ot_term, ot_skipped = _ot_term(
                    model_cfg, params, cfg, batch, composed, memory,
                    noun_ok, whole_ok, marker, dropout_rng)
            try:
                total, report = lo.total_loss(
                    mle, disagree, ot_term, weights, step,
                    ppl=float(np.exp(nll / tokens)), ot_skipped=ot_skipped)
                graph.backward(total)
            except NumericError:
                _dump_diagnostics(out_dir, step, batch)
                raise
        if not _grads_finite(params):
            skipped_steps += 1
            print(f"step {step}: non-finite gradients, step skipped",
                  file=sys.stderr)
            log_lines.append(report.to_json())
            step += 1
            continue
        if cfg.grad_clip > 0:
            clip_grads(params, cfg.grad_clip)
        adam_step(params, adam, cfg)
        log_lines.append(report.to_json())
        step += 1
        if cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0 \
                and step < cfg.max_steps:
            mo.save_checkpoint(
                os.path.join(out_dir, f"checkpoint_step{step}.bin"),
                model_cfg, params, vocab_hash, step)

    mo.save_checkpoint(os.path.join(out_dir, FINAL_CHECKPOINT), model_cfg,
                       params, vocab_hash, step)
    atomic_write_text(os.path.join(out_dir, LOG_NAME),
                      "\n".join(log_lines) + "\n")
    return {
        "steps": step,
        "epochs": epoch,
        "skipped_steps": skipped_steps,
        "out_dir": os.fspath(out_dir),
        "checkpoint": os.path.join(out_dir, FINAL_CHECKPOINT),
        "log": os.path.join(out_dir, LOG_NAME),
        "vocab": os.path.join(out_dir, VOCAB_NAME),
        "final_ppl": evaluate_perplexity(model_cfg, params, train_examples,
                                         vocab, cfg.token_budget, lexicon),
    }


def _dump_diagnostics(out_dir, step, batch: Batch) -> None:
    payload = {
        "step": step,
        "src": batch.src.tolist(),
        "tgt_in": batch.tgt_in.tolist(),
        "tgt_out": batch.tgt_out.tolist(),
    }
    atomic_write_text(os.path.join(out_dir, f"diagnostic_step{step}.json"),
                      json.dumps(payload) + "\n")


def evaluate_perplexity(model_cfg: mo.ModelConfig, params: mo.ParamSet,
                        examples: list[Example], vocab: Vocab,
                        token_budget: int = 4096,
                        lexicon: NounLexicon | None = None) -> float:
    """exp(mean NLL per non-pad token) in evaluation mode (no dropout)."""
    total_nll = 0.0
    total_tokens = 0.0
    for batch in batch_iterator(examples, vocab, token_budget, 0, lexicon):
        _, _, _, dist = _forward_batch(model_cfg, params, batch, False, None)
        nll, tokens = lo.nll_and_tokens(dist["p_final"].data, batch.tgt_out,
                                        batch.tgt_mask)
        total_nll += nll
        total_tokens += tokens
    return float(np.exp(total_nll / total_tokens))


def generate_texts(model_cfg: mo.ModelConfig, params: mo.ParamSet,
                   vocab: Vocab, tables: list[Table], beam: int = 5,
                   max_len: int | None = None,
                   batch_size: int = 64) -> list[str]:
    """Decode one text per table, in order. beam=1 uses batched greedy
    decoding; larger beams search per example."""
    max_len = max_len or model_cfg.max_len
    encoded = [np.asarray(linearize(t, vocab).tokens, dtype=np.int64)
               for t in tables]
    texts: list[str] = []
    if beam == 1:
        for start in range(0, len(encoded), batch_size):
            chunk = encoded[start:start + batch_size]
            s = max(len(ids) for ids in chunk)
            src = np.full((len(chunk), s), PAD, dtype=np.int64)
            mask = np.zeros((len(chunk), s))
            for k, ids in enumerate(chunk):
                src[k, :len(ids)] = ids
                mask[k, :len(ids)] = 1.0
            outs = mo.greedy_decode(model_cfg, params, src, mask, max_len)
            texts.extend(detokenize(vocab.decode(ids)) for ids in outs)
    else:
        for ids in encoded:
            seq, _ = mo.beam_search(model_cfg, params, ids, beam, max_len)
            texts.append(detokenize(vocab.decode(seq)))
    return texts


def generate_from_checkpoint(checkpoint_path, vocab_path, tables: list[Table],
                             beam: int = 5, max_len: int | None = None
                             ) -> list[str]:
    model_cfg, params, vocab_hash, _ = mo.load_checkpoint(checkpoint_path)
    vocab = Vocab.load(vocab_path)
    if vocab.content_hash() != vocab_hash:
        raise DataError("vocabulary hash does not match the checkpoint")
    return generate_texts(model_cfg, params, vocab, tables, beam, max_len)
