"""Pseudo-label generation with mean completion for hard samples.

A pseudo-label is the binary mask of positive logits. A hard sample is one
whose mask is empty (nothing detected). The mean completer replaces the
logits of hard samples with the elementwise mean of all logit maps in the
batch and re-thresholds, so hard samples inherit the batch consensus.
Pseudo-labels never carry gradients.
"""

from dataclasses import dataclass

import torch

from .errors import ValidationError


@dataclass
class PseudoLabelBatch:
    masks: torch.Tensor
    hard_flags: torch.Tensor
    recombined_logits: torch.Tensor


def normal_pseudolabel(logits):
    """Binary mask of strictly positive logits (ties fall to background)."""
    return (logits.detach() > 0).to(logits.dtype)


def detect_hard(masks):
    """Per-sample flag: True where the mask has no foreground at all."""
    if masks.dim() < 3:
        raise ValidationError("expected a batch of masks (N, ..., H, W)")
    return masks.flatten(1).sum(dim=1) == 0


def mean_completer(logits) -> PseudoLabelBatch:
    """Pseudo-labels with hard samples completed by the batch-mean logits.

    Keeps non-hard samples' masks unchanged; the returned recombined logits
    are the input logits with hard samples' maps replaced by the elementwise
    mean over the whole batch (all n maps, hard ones included).
    """
    if logits.dim() < 3:
        raise ValidationError("expected a batch of logit maps (N, ..., H, W)")
    if logits.shape[0] < 1:
        raise ValidationError("batch must contain at least one map")
    logits = logits.detach()
    masks = (logits > 0).to(logits.dtype)
    hard = detect_hard(masks)
    mean_map = logits.mean(dim=0, keepdim=True)
    where = hard.reshape((-1,) + (1,) * (logits.dim() - 1))
    recombined = torch.where(where, mean_map, logits)
    completed = (recombined > 0).to(logits.dtype)
    return PseudoLabelBatch(
        masks=completed, hard_flags=hard, recombined_logits=recombined
    )
