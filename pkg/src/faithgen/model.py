"""Transformer encoder-decoder with factorized embeddings, a copy-mechanism
output layer, greedy/beam decoding, and a differentiable soft-argmax
decoding path.

Blocks are pre-norm with a final layer norm on each stack. The copy
distribution mixes the vocabulary softmax with encoder-decoder attention
from the last decoder block (averaged over heads), scattered into
vocabulary space by summing the attention mass of source positions that
share a token id; tokens absent from the source receive zero copy mass.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, EOS, PAD
from .errors import DataError, NumericError
from .fileio import atomic_write_bytes

NEG_INF = -1e9
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 512
    factor_dim: int = 128
    ff_dim: int = 2048
    heads: int = 8
    blocks: int = 3
    max_len: int = 256
    dropout: float = 0.1
    label_smoothing: float = 0.1
    copy_enabled: bool = True
    factorized: bool = True

    def validate(self) -> None:
        if self.factor_dim > self.embed_dim:
            raise ValueError("factor_dim must not exceed embed_dim")
        if self.embed_dim % self.heads != 0:
            raise ValueError("heads must divide embed_dim")
        if self.blocks < 1:
            raise ValueError("need at least one block")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def desk(cls, vocab_size: int, **overrides) -> "ModelConfig":
        """Desk-scale profile: small enough to overfit in minutes."""
        base = dict(embed_dim=64, factor_dim=32, ff_dim=128, heads=4,
                    blocks=2, max_len=128)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)


class ParamSet:
    """Named parameter tensors in fixed insertion order."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def total_count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> ParamSet:
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = ParamSet()
    d, f = cfg.embed_dim, cfg.ff_dim
    if cfg.factorized:
        p.add("embed.e1", _glorot(rng, (cfg.vocab_size, cfg.factor_dim)))
        p.add("embed.e2", _glorot(rng, (cfg.factor_dim, d)))
    else:
        p.add("embed.e", _glorot(rng, (cfg.vocab_size, d)))

    def attn_params(prefix):
        for part in ("wq", "wk", "wv", "wo"):
            p.add(f"{prefix}.{part}", _glorot(rng, (d, d)))
        for part in ("bq", "bk", "bv", "bo"):
            p.add(f"{prefix}.{part}", np.zeros(d))

    def ln_params(prefix):
        p.add(f"{prefix}.g", np.ones(d))
        p.add(f"{prefix}.b", np.zeros(d))

    def ff_params(prefix):
        p.add(f"{prefix}.w1", _glorot(rng, (d, f)))
        p.add(f"{prefix}.b1", np.zeros(f))
        p.add(f"{prefix}.w2", _glorot(rng, (f, d)))
        p.add(f"{prefix}.b2", np.zeros(d))

    for i in range(cfg.blocks):
        ln_params(f"enc{i}.ln1")
        attn_params(f"enc{i}.self")
        ln_params(f"enc{i}.ln2")
        ff_params(f"enc{i}.ff")
    ln_params("enc.ln")
    for i in range(cfg.blocks):
        ln_params(f"dec{i}.ln1")
        attn_params(f"dec{i}.self")
        ln_params(f"dec{i}.ln2")
        attn_params(f"dec{i}.cross")
        ln_params(f"dec{i}.ln3")
        ff_params(f"dec{i}.ff")
    ln_params("dec.ln")
    if cfg.copy_enabled:
        p.add("copy.w", _glorot(rng, (d, 1)))
        p.add("copy.b", np.zeros(1))
    return p


def embedding_param_count(cfg: ModelConfig) -> int:
    if cfg.factorized:
        return cfg.vocab_size * cfg.factor_dim + cfg.factor_dim * cfg.embed_dim
    return cfg.vocab_size * cfg.embed_dim


@functools.lru_cache(maxsize=8)
def sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    idx = np.arange(0, dim, 2).astype(np.float64)
    angles = pos / np.power(10000.0, idx / dim)
    table = np.zeros((max_len, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim - dim // 2])
    table.setflags(write=False)
    return table


def composed_embedding(cfg: ModelConfig, params: ParamSet) -> Tensor:
    """The V x D embedding matrix (product of the factors when factorized)."""
    if cfg.factorized:
        return ad.matmul(params["embed.e1"], params["embed.e2"])
    return params["embed.e"]


def compose_embedding(cfg: ModelConfig, params: ParamSet, token_ids) -> Tensor:
    """Embedding rows for token ids: lookup(E1) . E2 on the factorized path."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise DataError("token id out of range")
    if cfg.factorized:
        return ad.matmul(ad.embedding(params["embed.e1"], ids), params["embed.e2"])
    return ad.embedding(params["embed.e"], ids)


def _dropout(x: Tensor, rate: float, train: bool,
             rng: Optional[np.random.Generator]) -> Tensor:
    if not train or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, mask)


def _attention(params: ParamSet, prefix: str, q_in: Tensor, k_full: Tensor,
               v_full: Tensor, mask: Optional[np.ndarray], heads: int,
               train: bool, rate: float, rng) -> tuple[Tensor, Tensor]:
    """Multi-head attention; k_full/v_full are already projected and
    head-split (B, h, Tk, dh). Returns (output, pre-dropout weights)."""
    b, tq, d = q_in.shape
    dh = d // heads
    q = ad.add(ad.matmul(q_in, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    qh = ad.transpose(ad.reshape(q, (b, tq, heads, dh)), (0, 2, 1, 3))
    scores = ad.mul(ad.matmul(qh, ad.transpose(k_full, (0, 1, 3, 2))),
                    1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, mask)
    att = ad.softmax(scores)
    ctx = ad.matmul(_dropout(att, rate, train, rng), v_full)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    out = ad.add(ad.matmul(merged, params[f"{prefix}.wo"]),
                 params[f"{prefix}.bo"])
    return out, att


def _project_kv(params: ParamSet, prefix: str, kv_in: Tensor, heads: int
                ) -> tuple[Tensor, Tensor]:
    b, tk, d = kv_in.shape
    dh = d // heads
    k = ad.add(ad.matmul(kv_in, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = ad.add(ad.matmul(kv_in, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    kh = ad.transpose(ad.reshape(k, (b, tk, heads, dh)), (0, 2, 1, 3))
    vh = ad.transpose(ad.reshape(v, (b, tk, heads, dh)), (0, 2, 1, 3))
    return kh, vh


def _ln(params: ParamSet, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _ff(params: ParamSet, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]),
                       params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _embed_inputs(cfg: ModelConfig, composed: Tensor, ids: np.ndarray,
                  position_offset: int = 0) -> Tensor:
    length = ids.shape[-1]
    if position_offset + length > cfg.max_len:
        raise DataError(f"sequence length {position_offset + length} exceeds "
                        f"max_len {cfg.max_len}")
    x = ad.mul(ad.embedding(composed, ids), math.sqrt(cfg.embed_dim))
    pos = sinusoidal_positions(cfg.max_len, cfg.embed_dim)
    return ad.add(x, pos[position_offset:position_offset + length])


def _prepare_src(src_ids, src_mask):
    src_ids = np.asarray(src_ids, dtype=np.int64)
    squeeze = src_ids.ndim == 1
    if squeeze:
        src_ids = src_ids[None, :]
    if src_mask is None:
        src_mask = np.ones(src_ids.shape)
    return src_ids, np.asarray(src_mask, dtype=np.float64), squeeze


def encode(cfg: ModelConfig, params: ParamSet, src_ids, src_mask=None,
           train: bool = False, rng=None,
           composed: Optional[Tensor] = None) -> Tensor:
    """Encoder memory (B, S, D); accepts a single sequence and returns
    (S, D) in that case. Deterministic when ``train`` is false."""
    src_ids, src_mask, squeeze = _prepare_src(src_ids, src_mask)
    if composed is None:
        composed = composed_embedding(cfg, params)
    x = _embed_inputs(cfg, composed, src_ids)
    x = _dropout(x, cfg.dropout, train, rng)
    add_mask = (1.0 - src_mask)[:, None, None, :] * NEG_INF
    for i in range(cfg.blocks):
        h = _ln(params, f"enc{i}.ln1", x)
        kh, vh = _project_kv(params, f"enc{i}.self", h, cfg.heads)
        a, _ = _attention(params, f"enc{i}.self", h, kh, vh, add_mask,
                          cfg.heads, train, cfg.dropout, rng)
        x = ad.add(x, _dropout(a, cfg.dropout, train, rng))
        h = _ln(params, f"enc{i}.ln2", x)
        x = ad.add(x, _dropout(_ff(params, f"enc{i}.ff", h), cfg.dropout,
                               train, rng))
    memory = _ln(params, "enc.ln", x)
    return ad.reshape(memory, memory.shape[1:]) if squeeze else memory


def decoder_forward(cfg: ModelConfig, params: ParamSet, composed: Tensor,
                    memory: Tensor, src_mask: np.ndarray, tgt_in: np.ndarray,
                    train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """Teacher-forced decoder pass.

    Returns (hidden states (B, T, D), cross-attention weights from the
    last block averaged over heads (B, T, S)).
    """
    b, t = tgt_in.shape
    x = _embed_inputs(cfg, composed, tgt_in)
    x = _dropout(x, cfg.dropout, train, rng)
    causal = np.triu(np.full((t, t), NEG_INF), k=1)[None, None, :, :]
    cross_mask = (1.0 - src_mask)[:, None, None, :] * NEG_INF
    p_att = None
    for i in range(cfg.blocks):
        h = _ln(params, f"dec{i}.ln1", x)
        kh, vh = _project_kv(params, f"dec{i}.self", h, cfg.heads)
        a, _ = _attention(params, f"dec{i}.self", h, kh, vh, causal,
                          cfg.heads, train, cfg.dropout, rng)
        x = ad.add(x, _dropout(a, cfg.dropout, train, rng))
        h = _ln(params, f"dec{i}.ln2", x)
        ck, cv = _project_kv(params, f"dec{i}.cross", memory, cfg.heads)
        a, att = _attention(params, f"dec{i}.cross", h, ck, cv, cross_mask,
                            cfg.heads, train, cfg.dropout, rng)
        if i == cfg.blocks - 1:
            p_att = ad.tmean(att, axis=1)
        x = ad.add(x, _dropout(a, cfg.dropout, train, rng))
        h = _ln(params, f"dec{i}.ln3", x)
        x = ad.add(x, _dropout(_ff(params, f"dec{i}.ff", h), cfg.dropout,
                               train, rng))
    hidden = _ln(params, "dec.ln", x)
    return hidden, p_att


def source_onehot(src_ids: np.ndarray, src_mask: np.ndarray,
                  vocab_size: int) -> np.ndarray:
    """(B, S, V) scatter matrix: row s is one-hot at the source token id,
    zeroed on padding."""
    b, s = src_ids.shape
    onehot = np.zeros((b, s, vocab_size))
    rows = np.repeat(np.arange(b), s)
    cols = np.tile(np.arange(s), b)
    onehot[rows, cols, src_ids.reshape(-1)] = src_mask.reshape(-1)
    return onehot


def output_distribution(cfg: ModelConfig, params: ParamSet, composed: Tensor,
                        hidden: Tensor, p_att: Optional[Tensor],
                        src_onehot: Optional[np.ndarray]) -> dict:
    """Vocabulary distribution per position; applies the copy mix when the
    model has it enabled."""
    logits = ad.matmul(hidden, ad.transpose(composed))
    p_vocab = ad.softmax(logits)
    out = {"logits": logits, "p_vocab": p_vocab, "p_final": p_vocab,
           "p_gen": None}
    if cfg.copy_enabled:
        if p_att is None or src_onehot is None:
            raise ValueError("copy mix needs attention weights and source ids")
        p_gen = ad.sigmoid(ad.add(ad.matmul(hidden, params["copy.w"]),
                                  params["copy.b"]))
        p_att_vocab = ad.matmul(p_att, src_onehot)
        p_final = ad.add(ad.mul(p_gen, p_vocab),
                         ad.mul(ad.sub(1.0, p_gen), p_att_vocab))
        out["p_final"] = p_final
        out["p_gen"] = p_gen
    return out


@dataclass
class DecoderStepState:
    """Final-position decoder state for a single prefix."""

    hidden: Tensor      # (D,)
    p_att: Tensor       # (S,)
    logits: Tensor      # (V,)
    p_vocab: Tensor     # (V,)


def decode_step(cfg: ModelConfig, params: ParamSet, memory: Tensor,
                src_mask: np.ndarray, prefix_ids) -> DecoderStepState:
    """Stateless single-example decode: run the full prefix, return the
    state at its last position."""
    prefix = np.asarray(prefix_ids, dtype=np.int64)
    if prefix.ndim != 1 or prefix[0] != BOS:
        raise DataError("prefix must be one-dimensional and start with <bos>")
    mem = memory if memory.ndim == 3 else ad.reshape(memory, (1,) + memory.shape)
    composed = composed_embedding(cfg, params)
    hidden, p_att = decoder_forward(cfg, params, composed, mem,
                                    np.asarray(src_mask, dtype=np.float64)
                                    .reshape(1, -1), prefix[None, :])
    t = prefix.shape[0] - 1
    h_last = ad.reshape(ad.slice_axis(hidden, 1, t, t + 1), (cfg.embed_dim,))
    att_last = ad.reshape(ad.slice_axis(p_att, 1, t, t + 1), (mem.shape[1],))
    logits = ad.matmul(ad.reshape(h_last, (1, cfg.embed_dim)),
                       ad.transpose(composed))
    logits = ad.reshape(logits, (cfg.vocab_size,))
    return DecoderStepState(h_last, att_last, logits, ad.softmax(logits))


def copy_mix(cfg: ModelConfig, params: ParamSet, state: DecoderStepState,
             source_ids, vocab_size: int) -> Tensor:
    """Copy-mechanism mixture for one step: p_g * P_vocab + (1-p_g) *
    scatter(P_att); source positions sharing an id pool their attention
    mass, and ids absent from the source get zero copy mass."""
    if not cfg.copy_enabled:
        raise ValueError("copy mix called with copy disabled")
    src = np.asarray(source_ids, dtype=np.int64)
    onehot = source_onehot(src[None, :], np.ones((1, src.shape[0])),
                           vocab_size)[0]
    p_gen = ad.sigmoid(ad.add(ad.matmul(ad.reshape(state.hidden, (1, -1)),
                                        params["copy.w"]), params["copy.b"]))
    p_gen = ad.reshape(p_gen, (1,))
    att_vocab = ad.matmul(ad.reshape(state.p_att, (1, -1)), onehot)
    att_vocab = ad.reshape(att_vocab, (vocab_size,))
    return ad.add(ad.mul(p_gen, state.p_vocab),
                  ad.mul(ad.sub(1.0, p_gen), att_vocab))


# ---------------------------------------------------------------------------
# incremental decoding
# ---------------------------------------------------------------------------


class DecoderCache:
    """Per-block self-attention K/V built step by step, plus fixed
    projections of the encoder memory for cross attention."""

    def __init__(self, cfg: ModelConfig, params: ParamSet, composed: Tensor,
                 memory: Tensor, src_mask: np.ndarray):
        self.cfg = cfg
        self.params = params
        self.composed = composed
        self.composed_t = ad.transpose(composed)
        self.memory = memory
        self.cross_mask = (1.0 - src_mask)[:, None, None, :] * NEG_INF
        self.cross_kv = [
            _project_kv(params, f"dec{i}.cross", memory, cfg.heads)
            for i in range(cfg.blocks)
        ]
        self.self_k: list[Optional[Tensor]] = [None] * cfg.blocks
        self.self_v: list[Optional[Tensor]] = [None] * cfg.blocks
        self.t = 0

    def reorder(self, order: np.ndarray) -> None:
        """Reindex the batch axis (beam search); eval mode only."""
        take = lambda t: Tensor(t.data[order])
        self.cross_kv = [(take(k), take(v)) for k, v in self.cross_kv]
        self.self_k = [take(k) if k is not None else None for k in self.self_k]
        self.self_v = [take(v) if v is not None else None for v in self.self_v]
        self.memory = take(self.memory)
        self.cross_mask = self.cross_mask[order]


def step_decoder(cache: DecoderCache, x_embedded: Tensor,
                 train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """Advance the incremental decoder by one position.

    ``x_embedded`` is the already scaled-and-positioned input (B, 1, D).
    Returns (hidden (B, 1, D), cross attention head-average (B, 1, S)).
    """
    cfg, params = cache.cfg, cache.params
    x = x_embedded
    p_att = None
    for i in range(cfg.blocks):
        h = _ln(params, f"dec{i}.ln1", x)
        kh, vh = _project_kv(params, f"dec{i}.self", h, cfg.heads)
        if cache.self_k[i] is None:
            cache.self_k[i], cache.self_v[i] = kh, vh
        else:
            cache.self_k[i] = ad.concat([cache.self_k[i], kh], axis=2)
            cache.self_v[i] = ad.concat([cache.self_v[i], vh], axis=2)
        a, _ = _attention(params, f"dec{i}.self", h, cache.self_k[i],
                          cache.self_v[i], None, cfg.heads, train,
                          cfg.dropout, rng)
        x = ad.add(x, _dropout(a, cfg.dropout, train, rng))
        h = _ln(params, f"dec{i}.ln2", x)
        ck, cv = cache.cross_kv[i]
        a, att = _attention(params, f"dec{i}.cross", h, ck, cv,
                            cache.cross_mask, cfg.heads, train, cfg.dropout,
                            rng)
        if i == cfg.blocks - 1:
            p_att = ad.tmean(att, axis=1)
        x = ad.add(x, _dropout(a, cfg.dropout, train, rng))
        h = _ln(params, f"dec{i}.ln3", x)
        x = ad.add(x, _dropout(_ff(params, f"dec{i}.ff", h), cfg.dropout,
                               train, rng))
    cache.t += 1
    return _ln(params, "dec.ln", x), p_att


def _step_distribution(cache: DecoderCache, hidden: Tensor, p_att: Tensor,
                       src_onehot: Optional[np.ndarray]) -> np.ndarray:
    cfg = cache.cfg
    logits = ad.matmul(hidden, cache.composed_t)
    p_vocab = ad.softmax(logits)
    if not cfg.copy_enabled:
        return p_vocab.data[:, 0, :]
    p_gen = ad.sigmoid(ad.add(ad.matmul(hidden, cache.params["copy.w"]),
                              cache.params["copy.b"]))
    att_vocab = ad.matmul(p_att, src_onehot)
    p_final = ad.add(ad.mul(p_gen, p_vocab),
                     ad.mul(ad.sub(1.0, p_gen), att_vocab))
    return p_final.data[:, 0, :]


def _embed_step(cfg: ModelConfig, composed: Tensor, ids: np.ndarray,
                position: int) -> Tensor:
    return _embed_inputs(cfg, composed, ids[:, None], position_offset=position)


def greedy_decode(cfg: ModelConfig, params: ParamSet, src_ids: np.ndarray,
                  src_mask: Optional[np.ndarray] = None,
                  max_len: Optional[int] = None) -> list:
    """Batched greedy decoding; returns token ids up to (excluding) <eos>,
    one list per input row (a bare list for a single 1-D input).

    <pad> and <bos> are never emitted.
    """
    src_ids, src_mask, squeeze = _prepare_src(src_ids, src_mask)
    max_len = max_len or cfg.max_len
    b = src_ids.shape[0]
    composed = composed_embedding(cfg, params)
    memory = encode(cfg, params, src_ids, src_mask, composed=composed)
    cache = DecoderCache(cfg, params, composed, memory, src_mask)
    onehot = source_onehot(src_ids, src_mask, cfg.vocab_size)
    current = np.full(b, BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(b)]
    for t in range(max_len - 1):
        x = _embed_step(cfg, composed, current, t)
        hidden, p_att = step_decoder(cache, x)
        probs = _step_distribution(cache, hidden, p_att, onehot).copy()
        probs[:, PAD] = -1.0
        probs[:, BOS] = -1.0
        current = probs.argmax(axis=1).astype(np.int64)
        for k in range(b):
            if not done[k]:
                if current[k] == EOS:
                    done[k] = True
                else:
                    outputs[k].append(int(current[k]))
        if done.all():
            break
    return outputs[0] if squeeze else outputs


def beam_search(cfg: ModelConfig, params: ParamSet, src_ids,
                beam: int = 5, max_len: Optional[int] = None
                ) -> tuple[list[int], float]:
    """Single-example beam search ranked by length-normalized log
    probability; ties break toward lower token ids. Returns (token ids
    without <bos>, normalized score). beam=1 matches greedy decoding."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    src = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
    max_len = max_len or cfg.max_len
    composed = composed_embedding(cfg, params)
    src_mask = np.ones(src.shape)
    memory = encode(cfg, params, src, src_mask, composed=composed)

    k = 1  # beams alive; grows to `beam` after the first expansion
    cache = DecoderCache(cfg, params, composed, memory, src_mask)
    onehot = source_onehot(src, src_mask, cfg.vocab_size)
    seqs: list[list[int]] = [[]]
    scores = np.zeros(1)
    current = np.full(1, BOS, dtype=np.int64)
    finished: list[tuple[list[int], float]] = []

    for t in range(max_len - 1):
        x = _embed_step(cfg, composed, current, t)
        hidden, p_att = step_decoder(cache, x)
        probs = _step_distribution(cache, hidden, p_att,
                                   np.repeat(onehot, k, axis=0))
        logp = np.log(np.maximum(probs, 1e-300))
        logp[:, PAD] = -np.inf
        logp[:, BOS] = -np.inf
        cands = scores[:, None] + logp
        token_order = np.arange(cfg.vocab_size)
        flat = [(-(cands[i, v]), v, i) for i in range(k)
                for v in np.lexsort((token_order, -cands[i]))[:beam]]
        flat.sort()
        next_seqs, next_scores, next_tokens, origins = [], [], [], []
        for neg_score, v, i in flat:
            if len(next_seqs) >= beam:
                break
            score = -neg_score
            if not np.isfinite(score):
                continue
            if v == EOS:
                seq = seqs[i] + [EOS]
                finished.append((seq, score / len(seq)))
            else:
                next_seqs.append(seqs[i] + [int(v)])
                next_scores.append(score)
                next_tokens.append(int(v))
                origins.append(i)
        if not next_seqs:
            break
        k = len(next_seqs)
        cache.reorder(np.asarray(origins, dtype=np.int64))
        seqs = next_seqs
        scores = np.asarray(next_scores)
        current = np.asarray(next_tokens, dtype=np.int64)
        if len(finished) >= beam:
            break
    for seq, score in zip(seqs, scores):
        if seq:
            finished.append((seq, score / len(seq)))
    if not finished:
        return [], -np.inf
    finished.sort(key=lambda item: (-item[1], item[0]))
    best, score = finished[0]
    return best, float(score)


def soft_decode(cfg: ModelConfig, params: ParamSet, src_ids, length: int,
                temperature: float = 0.1, train: bool = False, rng=None,
                composed: Optional[Tensor] = None,
                memory: Optional[Tensor] = None,
                src_mask: Optional[np.ndarray] = None
                ) -> tuple[Tensor, np.ndarray]:
    """Differentiable free-running decode via the soft-argmax trick.

    At each step the soft token softmax(S_t / temperature) composed with
    the embedding matrix is emitted and fed back as the next input.
    Returns (soft embeddings (B, length, D), argmax ids (B, length));
    single-sequence input gives (length, D).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    src_ids, src_mask_, squeeze = _prepare_src(src_ids, src_mask)
    if composed is None:
        composed = composed_embedding(cfg, params)
    if memory is None:
        memory = encode(cfg, params, src_ids, src_mask_, train=train, rng=rng,
                        composed=composed)
    cache = DecoderCache(cfg, params, composed, memory, src_mask_)
    b = src_ids.shape[0]
    bos = np.full(b, BOS, dtype=np.int64)
    x = _embed_step(cfg, composed, bos, 0)
    soft_steps: list[Tensor] = []
    argmax_ids = np.zeros((b, length), dtype=np.int64)
    pos_table = sinusoidal_positions(cfg.max_len, cfg.embed_dim)
    for t in range(length):
        hidden, _ = step_decoder(cache, x, train=train, rng=rng)
        logits = ad.matmul(hidden, cache.composed_t)     # (B, 1, V)
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("non-finite logits in soft decode")
        soft = ad.softmax(ad.mul(logits, 1.0 / temperature))
        soft_emb = ad.matmul(soft, composed)             # (B, 1, D)
        soft_steps.append(soft_emb)
        argmax_ids[:, t] = logits.data[:, 0, :].argmax(axis=1)
        if t + 1 < length:
            x = ad.add(ad.mul(soft_emb, math.sqrt(cfg.embed_dim)),
                       pos_table[t + 1:t + 2])
    out = ad.concat(soft_steps, axis=1)
    if squeeze:
        return ad.reshape(out, (length, cfg.embed_dim)), argmax_ids[0]
    return out, argmax_ids


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, params: ParamSet,
                    vocab_hash: str, step: int) -> None:
    """JSON header line + concatenated little-endian float64 blobs."""
    manifest = []
    offset = 0
    blobs = []
    for name, tensor in params.items():
        blob = tensor.data.astype("<f8").tobytes()
        manifest.append([name, list(tensor.data.shape), offset])
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "vocab_hash": vocab_hash,
        "step": step,
        "manifest": manifest,
    }
    payload = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    atomic_write_bytes(path, payload + b"".join(blobs))


def load_checkpoint(path) -> tuple[ModelConfig, ParamSet, str, int]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise DataError("checkpoint missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError("unsupported checkpoint format version")
    try:
        cfg = ModelConfig(**header["config"])
        manifest = header["manifest"]
        vocab_hash = header["vocab_hash"]
        step = int(header["step"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from exc
    body = raw[newline + 1:]
    params = ParamSet()
    for name, shape, offset in manifest:
        size = int(np.prod(shape)) if shape else 1
        end = offset + size * 8
        if end > len(body):
            raise DataError(f"checkpoint truncated at parameter {name}")
        arr = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape)
        params.add(name, arr.copy())
    return cfg, params, vocab_hash, step
