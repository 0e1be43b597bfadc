"""Loss functions and the weighted composite objective.

All segmentation losses are soft Dice over the whole batch; adversarial
losses follow the Wasserstein convention (critic maximizes the score gap,
so both sides are written as quantities to minimize); the entropy loss sums
per-pixel Shannon entropy (natural log) and divides by the number of maps
only, not by the pixel count.
"""

import math
from dataclasses import dataclass, fields
from typing import Optional

import torch

from .errors import ValidationError

DICE_EPS = 1e-6

# Fixed term order; composition and log reconstruction both follow it.
# The last two exist only for the in-situ alignment variant, whose critic
# scores stem feature maps instead of logit maps.
TERM_ORDER = (
    "seg_source",
    "seg_u3",
    "seg_u4",
    "pamr",
    "critic_d1_o2",
    "adv_gen_u2",
    "critic_d1_o3",
    "adv_gen_u3",
    "critic_d2_q2",
    "adv_gen_q2",
    "entropy",
    "critic_d3_f2",
    "adv_gen_f2",
)


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights of the composite objective.

    Defaults encode the first training stage; once the partner stage begins
    (epoch >= stage_switch_epoch) the self-learning weight seg_u3 takes the
    value seg_u3_stage2 and nothing else changes.
    """

    seg_source: float = 1.0
    seg_u3: float = 1.0
    seg_u3_stage2: float = 5.0
    seg_u4: float = 1.0
    pamr: float = 1.0
    critic_d1_o2: float = 0.5
    adv_gen_u2: float = 1.0
    critic_d1_o3: float = 0.5
    adv_gen_u3: float = 1.0
    critic_d2_q2: float = 0.5
    adv_gen_q2: float = 1.0
    entropy: float = 5.0
    critic_d3_f2: float = 0.5
    adv_gen_f2: float = 1.0
    stage_switch_epoch: int = 70

    def value_for(self, term, epoch):
        if term == "seg_u3" and epoch >= self.stage_switch_epoch:
            return self.seg_u3_stage2
        return getattr(self, term)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term scalar values of one step; None marks an inactive term."""

    seg_source: Optional[float] = None
    seg_u3: Optional[float] = None
    seg_u4: Optional[float] = None
    pamr: Optional[float] = None
    critic_d1_o2: Optional[float] = None
    adv_gen_u2: Optional[float] = None
    critic_d1_o3: Optional[float] = None
    adv_gen_u3: Optional[float] = None
    critic_d2_q2: Optional[float] = None
    adv_gen_q2: Optional[float] = None
    entropy: Optional[float] = None
    critic_d3_f2: Optional[float] = None
    adv_gen_f2: Optional[float] = None
    total: float = 0.0

    def active_terms(self):
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name != "total" and getattr(self, f.name) is not None
        }


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ValidationError(
            f"prediction shape {tuple(pred.shape)} != target shape "
            f"{tuple(target.shape)}"
        )
    if pred.numel() == 0:
        raise ValidationError("empty tensors")
    if torch.min(pred) < 0 or torch.max(pred) > 1:
        raise ValidationError("predictions must lie in [0, 1]")
    if not torch.all((target == 0) | (target == 1)):
        raise ValidationError("targets must be binary (0/1)")


def dice_loss(pred, target, eps=DICE_EPS):
    """Soft Dice loss over the whole batch.

    1 - (2*sum(y*p) + eps) / (sum(y^2) + sum(p^2) + eps); a perfect hard
    prediction gives 0, an empty prediction against an empty target gives 0
    by the eps convention.
    """
    _check_pair(pred, target)
    inter = torch.sum(target * pred)
    denom = torch.sum(target * target) + torch.sum(pred * pred)
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def gen_adv_loss(critic_scores):
    """Generator-side Wasserstein loss: negated mean critic score."""
    if critic_scores.numel() == 0:
        raise ValidationError("empty critic scores")
    return -torch.mean(critic_scores)


def critic_loss(source_scores, target_scores):
    """Critic-side Wasserstein loss: mean(target) - mean(source)."""
    if source_scores.numel() == 0 or target_scores.numel() == 0:
        raise ValidationError("empty critic scores")
    return torch.mean(target_scores) - torch.mean(source_scores)


def entropy_loss(probs):
    """Sum of per-pixel entropies -p*ln(p)-(1-p)*ln(1-p), divided by the
    number of maps in the batch (not by the pixel count). 0*ln(0) := 0."""
    if torch.min(probs) < 0 or torch.max(probs) > 1:
        raise ValidationError("probabilities must lie in [0, 1]")
    n = probs.shape[0] if probs.dim() >= 3 else 1
    tiny = torch.finfo(probs.dtype).tiny
    p = probs.clamp(tiny, 1.0)
    q = (1.0 - probs).clamp(tiny, 1.0)
    ent = -(probs * torch.log(p)) - ((1.0 - probs) * torch.log(q))
    return torch.sum(ent) / n


def compose_total(parts, weights: LossWeights, epoch: int) -> LossBreakdown:
    """Weight the supplied term values and sum them in fixed order.

    `parts` maps term name -> scalar (float or 0-dim tensor); missing terms
    are inactive and contribute nothing. The total is a plain float computed
    from the recorded component floats, so a logged record can be
    reconstructed exactly.
    """
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    unknown = set(parts) - set(TERM_ORDER)
    if unknown:
        raise ValidationError(f"unknown loss terms: {sorted(unknown)}")
    values = {}
    total = 0.0
    for term in TERM_ORDER:
        if term not in parts or parts[term] is None:
            continue
        v = parts[term]
        v = float(v.item()) if torch.is_tensor(v) else float(v)
        values[term] = v
        total += weights.value_for(term, epoch) * v
    if math.isnan(total):
        bad = [t for t, v in values.items() if math.isnan(v)]
        raise ValidationError(f"NaN loss terms: {bad}")
    return LossBreakdown(total=total, **values)
