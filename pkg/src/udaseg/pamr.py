"""Pixel-adaptive mask refinement.

Each pixel's probability is repeatedly replaced by an affinity-weighted
average of its neighborhood, where affinities come from intensity
similarity in the underlying image: k(i, j -> l, n) = -(x_ij - x_ln)^2 /
sigma_ij^2 by default (sigma is the local 3x3 standard deviation, floored),
softmax-normalized over the union of 3x3 neighborhoods at several dilations
(33 offsets including the center for dilations 1, 2, 4, 8). Boundaries are
handled by symmetric mirror reflection. Refinement is supervision-only: it
never carries gradients.

A binary map is refined as the 2-channel stack [p, 1-p] with channel
renormalization after every iteration, reading channel 0 back out.
"""

from dataclasses import dataclass

import torch

from .errors import DimensionError, ValidationError
from .losses import dice_loss

SIGMA_FLOOR = 1e-6
DEFAULT_DILATIONS = (1, 2, 4, 8)
DEFAULT_ITERATIONS = 10


@dataclass
class AffinityField:
    """Softmax-normalized neighbor weights: alpha (N, K, H, W) over offsets (K, 2)."""

    alpha: torch.Tensor
    offsets: tuple


@dataclass
class RefinedMask:
    probs: torch.Tensor
    pseudo: torch.Tensor


def neighbor_offsets(kernel_size=3, dilations=DEFAULT_DILATIONS):
    """Union of dilated (kernel x kernel) offset grids, center included once."""
    if kernel_size % 2 != 1 or kernel_size < 1:
        raise ValidationError(f"kernel_size must be odd, got {kernel_size}")
    half = kernel_size // 2
    offs = set()
    for d in dilations:
        if d < 1:
            raise ValidationError(f"dilations must be >= 1, got {d}")
        for dy in range(-half, half + 1):
            for dx in range(-half, half + 1):
                offs.add((dy * d, dx * d))
    return tuple(sorted(offs))


def _reflect_index(idx, n):
    # symmetric mirror with edge repetition (... 1 0 | 0 1 ... n-1 | n-1 ...):
    # pairs the +d and -d shift matrices as transposes, so a uniform-affinity
    # blur is doubly stochastic and conserves the map mean
    period = 2 * n
    m = torch.remainder(idx, period)
    return torch.where(m < n, m, period - 1 - m)


def _shift(x, dy, dx):
    """x[..., i+dy, j+dx] with reflected out-of-range indices."""
    h, w = x.shape[-2], x.shape[-1]
    rows = _reflect_index(torch.arange(h, device=x.device) + dy, h)
    cols = _reflect_index(torch.arange(w, device=x.device) + dx, w)
    return x.index_select(-2, rows).index_select(-1, cols)


def _as_nchw(t, name):
    if t.dim() == 2:
        return t[None, None], ("hw",)
    if t.dim() == 3:
        return t[:, None], ("nhw",)
    if t.dim() == 4:
        return t, ("nchw",)
    raise DimensionError(f"{name} must be 2-D, 3-D, or 4-D, got {t.dim()}-D")


def compute_affinity(
    image, kernel_size=3, dilations=DEFAULT_DILATIONS, squared=True
) -> AffinityField:
    """Affinity field of `image` ((H,W), (N,H,W), or (N,C,H,W)).

    With squared=False the kernel uses the signed difference
    -(x_ij - x_ln) / sigma^2 instead of the squared one.
    """
    img, _ = _as_nchw(image, "image")
    img = img.float() if not img.dtype.is_floating_point else img
    offsets = neighbor_offsets(kernel_size, dilations)

    # Local population std over the 3x3 dilation-1 window, reflected borders.
    window = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    acc = torch.zeros_like(img)
    acc_sq = torch.zeros_like(img)
    for dy, dx in window:
        v = _shift(img, dy, dx)
        acc = acc + v
        acc_sq = acc_sq + v * v
    mean = acc / len(window)
    var = (acc_sq / len(window) - mean * mean).clamp(min=0)
    sigma = torch.sqrt(var).clamp(min=SIGMA_FLOOR)

    logits = []
    for dy, dx in offsets:
        diff = img - _shift(img, dy, dx)
        if squared:
            k = -(diff * diff) / (sigma * sigma)
        else:
            k = -diff / (sigma * sigma)
        logits.append(k.mean(dim=1))  # average over image channels
    alpha = torch.softmax(torch.stack(logits, dim=1), dim=1)
    return AffinityField(alpha=alpha, offsets=offsets)


def refine(
    probs,
    image,
    iterations=DEFAULT_ITERATIONS,
    kernel_size=3,
    dilations=DEFAULT_DILATIONS,
    squared=True,
) -> RefinedMask:
    """Refine a probability map against its image; returns probs and the
    0.5-thresholded pseudo-mask. No gradients flow through the result."""
    if iterations < 1:
        raise ValidationError(f"iterations must be >= 1, got {iterations}")
    p_in, _ = _as_nchw(probs, "probs")
    if torch.min(p_in) < 0 or torch.max(p_in) > 1:
        raise ValidationError("probabilities must lie in [0, 1]")
    img, _ = _as_nchw(image, "image")
    if img.shape[0] != p_in.shape[0] or img.shape[-2:] != p_in.shape[-2:]:
        raise DimensionError(
            f"image shape {tuple(image.shape)} incompatible with probs "
            f"{tuple(probs.shape)}"
        )

    with torch.no_grad():
        field = compute_affinity(image, kernel_size, dilations, squared)
        alpha = field.alpha
        binary = p_in.shape[1] == 1
        p = torch.cat([p_in, 1.0 - p_in], dim=1) if binary else p_in.clone()
        p = p.detach()
        for _ in range(iterations):
            out = torch.zeros_like(p)
            for k, (dy, dx) in enumerate(field.offsets):
                out = out + alpha[:, k : k + 1] * _shift(p, dy, dx)
            total = out.sum(dim=1, keepdim=True)
            p = out / torch.where(total == 0, torch.ones_like(total), total)
        refined = p[:, :1] if binary else p
        refined = refined.reshape(probs.shape)
        pseudo = (refined > 0.5).to(refined.dtype)
    return RefinedMask(probs=refined, pseudo=pseudo)


def pamr_loss(
    probs,
    image,
    iterations=DEFAULT_ITERATIONS,
    kernel_size=3,
    dilations=DEFAULT_DILATIONS,
    squared=True,
):
    """Dice loss between `probs` and the refined pseudo-mask of its own
    detached copy. Gradients reach `probs` only through the Dice term."""
    refined = refine(
        probs.detach(), image, iterations, kernel_size, dilations, squared
    )
    return dice_loss(probs, refined.pseudo)
