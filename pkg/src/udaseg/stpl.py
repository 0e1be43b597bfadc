"""Student-to-partner supervision schedule between the two target nets.

Early training ("teacher-student"): U3 learns from the aligner's pseudo-
labels and U4 learns from U3's. Once the switch epoch is reached
("partners"): U3 drops the aligner's pseudo-labels and learns from U4
instead, while U4 keeps learning from U3. Pseudo-labels are already
detached, so neither partner's loss backpropagates into the other.
"""

from enum import Enum

from .errors import ValidationError
from .losses import dice_loss


class StplStage(Enum):
    TEACHER_STUDENT = "teacher_student"
    PARTNERS = "partners"


def stpl_stage(epoch, switch_epoch) -> StplStage:
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    if switch_epoch < 0:
        raise ValidationError(f"switch epoch must be >= 0, got {switch_epoch}")
    return StplStage.PARTNERS if epoch >= switch_epoch else StplStage.TEACHER_STUDENT


def stpl_losses(
    stage: StplStage,
    probs_u3,
    probs_u4,
    pseudo_from_u2,
    pseudo_from_u3,
    pseudo_from_u4,
):
    """(loss_u3, loss_u4) for the given stage.

    Teacher-student: loss_u3 = dice(p3, y2), loss_u4 = dice(p4, y3).
    Partners:        loss_u3 = dice(p3, y4), loss_u4 = dice(p4, y3);
    the aligner's pseudo-label y2 is no longer used.
    """
    if stage is StplStage.TEACHER_STUDENT:
        loss_u3 = dice_loss(probs_u3, pseudo_from_u2)
    else:
        loss_u3 = dice_loss(probs_u3, pseudo_from_u4)
    loss_u4 = dice_loss(probs_u4, pseudo_from_u3)
    return loss_u3, loss_u4
