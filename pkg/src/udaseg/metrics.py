"""Volume-level segmentation metrics.

Seven metrics per subject: Dice similarity (DS), Jaccard (JA), accuracy
(AC), precision (PR), sensitivity (SE), specificity (SP), and average
symmetric surface distance (ASSD) in physical units. Surfaces are
foreground voxels with at least one background 6-neighbor (out-of-volume
counts as background). An empty prediction surface against a non-empty
reference has no finite ASSD; it is reported as the physical volume
diagonal and a warning is logged.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ValidationError

logger = logging.getLogger(__name__)

METRIC_NAMES = ("DS", "JA", "AC", "PR", "SE", "SP", "ASSD")


@dataclass
class MetricsRecord:
    subject_id: str
    values: dict = field(default_factory=dict)


def _check_volumes(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} != reference shape {gt.shape}"
        )
    if pred.ndim != 3:
        raise DimensionError(f"expected 3-D volumes, got {pred.ndim}-D")
    for name, vol in (("prediction", pred), ("reference", gt)):
        if not np.all((vol == 0) | (vol == 1)):
            raise ValidationError(f"{name} must be binary (0/1)")
    return pred.astype(bool), gt.astype(bool)


def confusion_counts(pred, gt):
    """(tp, fp, fn, tn) as exact integers."""
    pred, gt = _check_volumes(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    return tp, fp, fn, tn


def surface_voxels(mask):
    """Foreground voxels with at least one background 6-neighbor."""
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def assd(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """Average symmetric surface distance in physical units."""
    pred, gt = _check_volumes(pred, gt)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise ValidationError(f"spacing must be 3 positive floats, got {spacing}")
    surf_p = surface_voxels(pred)
    surf_g = surface_voxels(gt)
    if not surf_p.any() and not surf_g.any():
        return 0.0
    if not surf_p.any() or not surf_g.any():
        diagonal = float(np.linalg.norm(np.array(pred.shape) * spacing))
        which = "prediction" if not surf_p.any() else "reference"
        logger.warning(
            "assd: empty %s surface, reporting volume diagonal %.4f", which, diagonal
        )
        return diagonal
    dt_g = ndimage.distance_transform_edt(~surf_g, sampling=spacing)
    dt_p = ndimage.distance_transform_edt(~surf_p, sampling=spacing)
    total = dt_g[surf_p].sum() + dt_p[surf_g].sum()
    return float(total / (surf_p.sum() + surf_g.sum()))


def compute_metrics(pred, gt, spacing=(1.0, 1.0, 1.0), subject_id="") -> MetricsRecord:
    tp, fp, fn, tn = confusion_counts(pred, gt)

    def ratio(num, den):
        return float(num / den) if den else 0.0

    values = {
        "DS": ratio(2 * tp, 2 * tp + fp + fn),
        "JA": ratio(tp, tp + fp + fn),
        "AC": ratio(tp + tn, tp + fp + fn + tn),
        "PR": ratio(tp, tp + fp),
        "SE": ratio(tp, tp + fn),
        "SP": ratio(tn, tn + fp),
        "ASSD": assd(pred, gt, spacing),
    }
    return MetricsRecord(subject_id=subject_id, values=values)


def aggregate(records):
    """Per-metric mean and standard deviation across subjects.

    Sample standard deviation (ddof=1); a single record reports 0.
    """
    if not records:
        raise ValidationError("no records to aggregate")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([r.values[name] for r in records], dtype=np.float64)
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out[name] = {"mean": float(vals.mean()), "std": std}
    return out
