"""Intensity-signal transforms.

weighted_self_information turns a probability map into the per-pixel
surprisal weight q = -p * ln(p) (0 at both p=0 and p=1, peaking at p=1/e),
which is what the shape/entropy critic consumes.

low_signal_augment stretches the dark end of an image: z = ln(max(x, xmin))
+ beta * x, then the squared min-max normalization of z per image. It makes
low-signal structures (e.g. organs rendered barely above background)
separable before segmentation.
"""

import logging

import torch

from .errors import ValidationError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-6


def weighted_self_information(probs):
    """q = -p * ln(p), elementwise, with 0 * ln(0) := 0. Differentiable."""
    if torch.min(probs) < 0 or torch.max(probs) > 1:
        raise ValidationError("probabilities must lie in [0, 1]")
    tiny = torch.finfo(probs.dtype).tiny
    return -probs * torch.log(probs.clamp(min=tiny))


def low_signal_augment(image, beta=3.0):
    """Squared min-max normalization of ln(max(x, 1e-6)) + beta*x.

    Accepts a single (H, W) map or a batch (..., H, W); normalization is per
    image over the trailing two axes. A constant image has no signal to
    stretch; it maps to all zeros and a warning is logged.
    """
    if beta <= 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    if image.dim() < 2:
        raise ValidationError("expected at least a 2-D image")
    if torch.min(image) < 0 or torch.max(image) > 1:
        raise ValidationError("image values must lie in [0, 1]")
    z = torch.log(image.clamp(min=LOG_FLOOR)) + beta * image
    lo = z.amin(dim=(-2, -1), keepdim=True)
    hi = z.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    flat = span.flatten() == 0
    if bool(flat.any()):
        logger.warning(
            "low_signal_augment: %d constant image(s), mapped to zeros",
            int(flat.sum()),
        )
    norm = (z - lo) / torch.where(span == 0, torch.ones_like(span), span)
    norm = torch.where(span == 0, torch.zeros_like(norm), norm)
    return norm * norm
