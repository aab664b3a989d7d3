"""The three-part training objective: label-smoothed likelihood, table-text
mean-embedding disagreement, and optimal-transport content matching.

The OT term treats the transport plan as a constant: the plan is solved on
detached costs and gradients flow only through the cost matrix (an
envelope-style treatment of the inner minimization).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .matching import OtConfig, ipot


@dataclass
class LossWeights:
    lam: float = 0.1            # disagreement weight
    gamma: float = 0.1          # OT weight
    ot_start_step: int = 0      # OT term is zero before this step
    embedding_source: str = "top_layer"   # or "embedding_layer"

    def validate(self) -> None:
        if not (np.isfinite(self.lam) and np.isfinite(self.gamma)):
            raise ValueError("loss weights must be finite")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ot_start_step < 0:
            raise ValueError("ot_start_step must be nonnegative")
        if self.embedding_source not in ("top_layer", "embedding_layer"):
            raise ValueError(f"unknown embedding source {self.embedding_source!r}")


@dataclass
class LossReport:
    mle: float
    disagree: float
    ot: float
    total: float
    step: int
    ppl: float = float("nan")
    ot_skipped: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step, "mle": self.mle, "disagree": self.disagree,
            "ot": self.ot, "total": self.total, "ppl": self.ppl,
            "ot_skipped": self.ot_skipped,
        }, sort_keys=True)


def mle_loss(p_final: Tensor, target_out: np.ndarray, pad_mask: np.ndarray,
             smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed negative log-likelihood over non-pad positions.

    The smoothed target puts 1 - eps on the gold token and eps / (V - 1)
    on every other id. Probabilities are floored at 1e-12 inside the log.
    """
    if not (0.0 <= smoothing < 1.0):
        raise ValueError("smoothing must be in [0, 1)")
    if p_final.ndim == 2:
        p_final = ad.reshape(p_final, (1,) + p_final.shape)
        target_out = np.asarray(target_out)[None, :]
        pad_mask = np.asarray(pad_mask)[None, :]
    vocab = p_final.shape[-1]
    logp = ad.log(p_final, floor=1e-12)
    logp_tgt = ad.take_along_last(logp, target_out)
    if smoothing > 0.0:
        off = smoothing / (vocab - 1)
        per_pos = ad.add(ad.mul(logp_tgt, 1.0 - smoothing - off),
                         ad.mul(ad.tsum(logp, axis=-1), off))
    else:
        per_pos = logp_tgt
    count = float(np.sum(pad_mask))
    total = ad.tsum(ad.mul(per_pos, pad_mask))
    return ad.mul(total, -1.0 / count)


def nll_and_tokens(p_final_data: np.ndarray, target_out: np.ndarray,
                   pad_mask: np.ndarray) -> tuple[float, float]:
    """Unsmoothed negative log-likelihood total and token count (plain
    numpy; used for perplexity monitoring)."""
    probs = np.take_along_axis(p_final_data, target_out[..., None], axis=-1)[..., 0]
    nll = -np.log(np.maximum(probs, 1e-12)) * pad_mask
    return float(nll.sum()), float(pad_mask.sum())


def _masked_mean(states: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    """(B, T, D) -> (B, D) mean over real positions."""
    if mask is None:
        return ad.tmean(states, axis=1)
    lengths = mask.sum(axis=1, keepdims=True)
    summed = ad.tsum(ad.mul(states, mask[:, :, None]), axis=1)
    return ad.mul(summed, 1.0 / lengths)


def disagreement_loss(table_states: Tensor, text_states: Tensor,
                      table_mask: Optional[np.ndarray] = None,
                      text_mask: Optional[np.ndarray] = None) -> Tensor:
    """Squared distance between the two sequences' mean embeddings.

    Accepts single pairs (len x D) or batches (B x len x D, averaged
    over the batch); pads are excluded via the masks.
    """
    single = table_states.ndim == 2
    if single:
        table_states = ad.reshape(table_states, (1,) + table_states.shape)
        text_states = ad.reshape(text_states, (1,) + text_states.shape)
    v_table = _masked_mean(table_states, table_mask)
    v_text = _masked_mean(text_states, text_mask)
    diff = ad.sub(v_table, v_text)
    per_example = ad.tsum(ad.mul(diff, diff), axis=1)
    return ad.tmean(per_example)


def ot_loss(table_embs: Tensor, text_embs: Tensor,
            config: Optional[OtConfig] = None,
            plan: Optional[np.ndarray] = None) -> tuple[Tensor, np.ndarray]:
    """Optimal-transport content matching between two embedding sets.

    Builds the cosine cost matrix differentiably, solves for the plan with
    IPOT on detached costs (unless a frozen plan is supplied), and returns
    sum(plan * cost) with the plan held constant.
    """
    if table_embs.shape[0] < 1 or text_embs.shape[0] < 1:
        raise ValueError("ot_loss requires non-empty embedding sets")
    config = config or OtConfig()
    cost = cosine_cost_tensor(table_embs, text_embs)
    n, m = cost.shape
    if plan is None:
        mu = np.full(n, 1.0 / n)
        nu = np.full(m, 1.0 / m)
        plan, _ = ipot(np.maximum(cost.data, 0.0), mu, nu,
                       config.beta, config.n_outer, config.n_inner)
    return ad.tsum(ad.mul(cost, plan)), plan


def cosine_cost_tensor(x: Tensor, y: Tensor) -> Tensor:
    """Differentiable pairwise cosine distance (rows of x vs rows of y)."""
    xn = ad.div(x, ad.sqrt(ad.tsum(ad.mul(x, x), axis=1, keepdims=True)))
    yn = ad.div(y, ad.sqrt(ad.tsum(ad.mul(y, y), axis=1, keepdims=True)))
    return ad.sub(1.0, ad.matmul(xn, ad.transpose(yn)))


def total_loss(mle: Tensor, disagree: Optional[Tensor], ot: Optional[Tensor],
               weights: LossWeights, step: int,
               ppl: float = float("nan"), ot_skipped: int = 0
               ) -> tuple[Tensor, LossReport]:
    """L = L_mle + lambda * L_disagree + gamma * L_ot, with the OT term
    zero before ot_start_step (the two-phase schedule)."""
    weights.validate()
    total = mle
    disagree_val = 0.0
    ot_val = 0.0
    if disagree is not None:
        disagree_val = disagree.item()
        if weights.lam > 0:
            total = ad.add(total, ad.mul(disagree, weights.lam))
    if ot is not None and step >= weights.ot_start_step:
        ot_val = ot.item()
        if weights.gamma > 0:
            total = ad.add(total, ad.mul(ot, weights.gamma))
    report = LossReport(mle=mle.item(), disagree=disagree_val, ot=ot_val,
                        total=total.item(), step=step, ppl=ppl,
                        ot_skipped=ot_skipped)
    return total, report
