"""Forgetting, retention and KL loss terms and their weighted combination.

All terms are batch means so the weights do not depend on batch size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch.nn import functional as F

from .scoring.score import SequenceScore

logger = logging.getLogger(__name__)

KL_REF_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.4
    alpha2: float = 0.4
    alpha3: float = 0.2
    beta: float = 0.1

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha1 + self.alpha2 + self.alpha3 <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    forget: float
    retention: float
    kl: float
    total: float

    def to_json(self) -> dict:
        return asdict(self)


def npo_forget_loss(
    theta_scores: Sequence[SequenceScore], ref_scores: Sequence[SequenceScore], beta: float = 0.1
) -> torch.Tensor:
    """``-(2/beta) * mean log sigmoid(-beta * (log pi_theta(y|x) - log pi_ref(y|x)))``.

    Sequence log-likelihoods are summed over target tokens. The reference side
    is detached.
    """
    if len(theta_scores) != len(ref_scores) or not theta_scores:
        raise ValueError(f"misaligned batch: {len(theta_scores)} policy vs {len(ref_scores)} reference scores")
    for t, r in zip(theta_scores, ref_scores):
        if t.count != r.count:
            raise ValueError("policy and reference scores cover different target regions")
    log_ratio = torch.stack([t.sum for t in theta_scores]) - torch.stack([r.sum.detach() for r in ref_scores])
    return -(2.0 / beta) * F.logsigmoid(-beta * log_ratio).mean()


def retention_loss(theta_scores: Sequence[SequenceScore]) -> torch.Tensor:
    """Mean over sequences of the per-token negative log-likelihood."""
    if not theta_scores:
        raise ValueError("retention batch is empty")
    return -torch.stack([s.mean for s in theta_scores]).mean()


def kl_unrelated_loss(
    theta_dists: torch.Tensor | Sequence[torch.Tensor], ref_dists: torch.Tensor | Sequence[torch.Tensor]
) -> torch.Tensor:
    """Forward ``KL(P_theta || P_ref)`` averaged over positions.

    Inputs are next-token log-probabilities, ``[positions, vocab]`` tensors or
    lists of them (concatenated along positions).
    """
    if not isinstance(theta_dists, torch.Tensor):
        theta_dists = torch.cat(list(theta_dists))
    if not isinstance(ref_dists, torch.Tensor):
        ref_dists = torch.cat(list(ref_dists))
    if theta_dists.shape != ref_dists.shape:
        raise ValueError(f"distribution shapes differ: {tuple(theta_dists.shape)} vs {tuple(ref_dists.shape)}")
    ref = ref_dists.detach()
    floor = math.log(KL_REF_FLOOR)
    p_theta = theta_dists.exp()
    clamped = (ref < floor) & (p_theta > 0)
    if bool(clamped.any()):
        logger.warning("KL: %d reference probabilities clamped at %g", int(clamped.sum()), KL_REF_FLOOR)
    per_pos = (p_theta * (theta_dists - ref.clamp_min(floor))).sum(-1)
    return per_pos.mean()


def weighted_sum(forget, retention, kl, weights: LossWeights):
    return weights.alpha1 * forget + weights.alpha2 * retention + weights.alpha3 * kl


def total_loss(forget, retention, kl, weights: LossWeights) -> LossBreakdown:
    vals = [float(x.detach()) if isinstance(x, torch.Tensor) else float(x) for x in (forget, retention, kl)]
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite loss component in {vals}")
    return LossBreakdown(*vals, total=weighted_sum(*vals, weights))
