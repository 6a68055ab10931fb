"""DPO and ORPO objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import PreferenceTuple
from .errors import ConfigError, ContractError, DomainError, NumericError
from .model import PolicyModel, SeqScore, score_batch


@dataclass(frozen=True)
class LossConfig:
    kind: str = "orpo"  # dpo | orpo
    beta: float = 0.1
    lam: float = 0.05
    orpo_prob: str = "mean"  # mean | product

    def validate(self) -> None:
        if self.kind not in ("dpo", "orpo"):
            raise ConfigError(f"unknown loss {self.kind!r}")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError("beta and lambda must be >= 0")
        if self.orpo_prob not in ("mean", "product"):
            raise ConfigError(f"orpo_prob must be mean or product, got {self.orpo_prob!r}")


@dataclass
class LossBreakdown:
    total: float
    sft_term: float
    contrastive_term: float
    margin: float
    beta: float
    lam: float
    pref_margin: float = 0.0
    loss: Tensor | None = field(default=None, repr=False, compare=False)


def _finite(*values) -> None:
    for v in values:
        data = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.all(np.isfinite(data)):
            raise NumericError("non-finite log-probability in loss")


def log_odds(avg_logprob: float) -> float:
    """log(p / (1 − p)) from g = log p, without forming p."""
    g = float(avg_logprob)
    if not g < 0:
        raise DomainError(f"log_odds needs log-probability < 0, got {g}")
    return g - float(ad.log1mexp_value(g))


def log_odds_tensor(g: Tensor) -> Tensor:
    if np.any(g.data >= 0):
        raise DomainError("log_odds needs every log-probability < 0")
    return g - ad.log1mexp(g)


# ---------------------------------------------------------------- vectorized cores


def dpo_core(theta_pos: Tensor, ref_pos, theta_neg: Tensor, ref_neg, beta: float):
    """Per-tuple DPO loss and margin; reference log-probs enter as constants."""
    ref_pos = np.asarray(ref_pos.data if isinstance(ref_pos, Tensor) else ref_pos)
    ref_neg = np.asarray(ref_neg.data if isinstance(ref_neg, Tensor) else ref_neg)
    _finite(theta_pos, theta_neg, ref_pos, ref_neg)
    margin = ad.scale((theta_pos - ref_pos) - (theta_neg - ref_neg), beta)
    return ad.neg(ad.log_sigmoid(margin)), margin


def orpo_core(pos_logp: Tensor, neg_logp: Tensor, pos_avg: Tensor, lam: float):
    """Per-tuple ORPO pieces: (sft, lambda-weighted contrastive, margin).

    ``pos_logp``/``neg_logp`` are whatever sequence log-probability the odds
    are built from (length-normalized by default).
    """
    _finite(pos_logp, neg_logp, pos_avg)
    margin = log_odds_tensor(pos_logp) - log_odds_tensor(neg_logp)
    sft = ad.neg(pos_avg)
    contrastive = ad.scale(ad.neg(ad.log_sigmoid(margin)), lam)
    return sft, contrastive, margin


# ---------------------------------------------------------------- single tuple


def dpo_loss(theta_pos: SeqScore, ref_pos: SeqScore, theta_neg: SeqScore, ref_neg: SeqScore,
             beta: float) -> LossBreakdown:
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    total, margin = dpo_core(theta_pos.logp, ref_pos.sum_logprob, theta_neg.logp,
                             ref_neg.sum_logprob, beta)
    return LossBreakdown(
        total=total.item(), sft_term=0.0, contrastive_term=total.item(), margin=margin.item(),
        beta=beta, lam=0.0, pref_margin=theta_pos.sum_logprob - theta_neg.sum_logprob, loss=total,
    )


def orpo_loss(theta_pos: SeqScore, theta_neg: SeqScore, lam: float,
              orpo_prob: str = "mean") -> LossBreakdown:
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    pos_avg = theta_pos.avg_tensor()
    if orpo_prob == "mean":
        pos_p, neg_p = pos_avg, theta_neg.avg_tensor()
    else:
        pos_p, neg_p = theta_pos.logp, theta_neg.logp
    sft, contrastive, margin = orpo_core(pos_p, neg_p, pos_avg, lam)
    total = sft + contrastive
    return LossBreakdown(
        total=total.item(), sft_term=sft.item(), contrastive_term=contrastive.item(),
        margin=margin.item(), beta=0.0, lam=lam,
        pref_margin=theta_pos.sum_logprob - theta_neg.sum_logprob, loss=total,
    )


# ---------------------------------------------------------------- batches


def batch_loss(tuples: Sequence[PreferenceTuple], policy: PolicyModel,
               reference: PolicyModel | None, config: LossConfig) -> LossBreakdown:
    """Arithmetic mean of the per-tuple losses; breakdown fields are batch means."""
    if not tuples:
        raise ContractError("empty batch")
    if config.kind == "dpo" and reference is None:
        raise ConfigError("DPO needs a reference model")
    if config.kind == "orpo" and reference is not None:
        raise ConfigError("ORPO is reference-free; got a reference model")
    chosen = [(t.prompt, t.chosen) for t in tuples]
    rejected = [(t.prompt, t.rejected) for t in tuples]
    # chosen and rejected are scored in separate passes so the chosen side is
    # computed exactly as an SFT pass over the same batch would be
    pos_scores = score_batch(policy, chosen, grad=policy.trainable)
    neg_scores = score_batch(policy, rejected, grad=policy.trainable)
    pos, neg = pos_scores.sums, neg_scores.sums
    pref_margin = float(np.mean(pos.data - neg.data))

    if config.kind == "dpo":
        ref_pos = score_batch(reference, chosen, grad=False).sums.data
        ref_neg = score_batch(reference, rejected, grad=False).sums.data
        per, margin = dpo_core(pos, ref_pos, neg, ref_neg, config.beta)
        total = ad.mean(per)
        return LossBreakdown(
            total=total.item(), sft_term=0.0, contrastive_term=total.item(),
            margin=float(np.mean(margin.data)), beta=config.beta, lam=0.0,
            pref_margin=pref_margin, loss=total,
        )

    pos_avg = pos_scores.avg_tensor()
    if config.orpo_prob == "mean":
        pos_p, neg_p = pos_avg, neg_scores.avg_tensor()
    else:
        pos_p, neg_p = pos, neg
    sft, contrastive, margin = orpo_core(pos_p, neg_p, pos_avg, config.lam)
    total = ad.mean(sft + contrastive)
    return LossBreakdown(
        total=total.item(), sft_term=float(np.mean(sft.data)),
        contrastive_term=float(np.mean(contrastive.data)), margin=float(np.mean(margin.data)),
        beta=0.0, lam=config.lam, pref_margin=pref_margin, loss=total,
    )


def sft_loss(policy: PolicyModel, pairs: Sequence[tuple]) -> Tensor:
    """Mean over examples of the per-token NLL of the response."""
    scores = score_batch(policy, pairs, grad=policy.trainable)
    return ad.neg(ad.mean(scores.avg_tensor()))


LN2 = math.log(2.0)
