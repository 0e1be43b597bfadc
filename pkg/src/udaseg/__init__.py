"""Cross-modality liver segmentation by unsupervised domain adaptation.

Six cooperating networks (four attention U-Nets, two Wasserstein critics)
trained with joint adversarial learning and self-learning, plus the
supporting pieces: signal transforms, pseudo-label completion, affinity-based
mask refinement, a metric suite, a synthetic two-domain dataset, and a CLI.
"""

from .errors import (
    CheckpointMismatchError,
    ConfigError,
    DimensionError,
    TrainingDivergedError,
    ValidationError,
    VolumeFormatError,
)
from .networks import (
    AttentionUNet,
    Critic,
    CriticConfig,
    SegNetConfig,
    SegNetOutput,
    build_critic,
    build_segnet,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    compose_total,
    critic_loss,
    dice_loss,
    entropy_loss,
    gen_adv_loss,
)
from .signals import low_signal_augment, weighted_self_information
from .pseudo import PseudoLabelBatch, mean_completer, normal_pseudolabel
from .pamr import compute_affinity, pamr_loss, refine
from .stpl import StplStage, stpl_losses, stpl_stage
from .metrics import (
    METRIC_NAMES,
    MetricsRecord,
    aggregate,
    assd,
    compute_metrics,
)
from .data import (
    Subject,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    load_volume,
    make_cv_splits,
    preprocess_ct,
    preprocess_mr,
    save_dataset,
)
from .training import (
    BundleConfig,
    ModelBundle,
    PretrainConfig,
    TrainConfig,
    TrainResult,
    VariantConfig,
    build_bundle,
    evaluate_subjects,
    extract_network,
    load_pretrain_checkpoint,
    load_uda_checkpoint,
    predict_volume,
    pretrain_source,
    save_pretrain_checkpoint,
    save_uda_checkpoint,
    share_and_freeze,
    train_uda,
    uda_step,
    validation_dice,
)
from .ablation import VARIANTS, run_ablation, variant_config
from .config import RunConfig, load_config, resolved_text, write_resolved

__version__ = "0.1.0"

__all__ = [
    "AttentionUNet",
    "BundleConfig",
    "CheckpointMismatchError",
    "ConfigError",
    "Critic",
    "CriticConfig",
    "DimensionError",
    "LossBreakdown",
    "LossWeights",
    "METRIC_NAMES",
    "MetricsRecord",
    "ModelBundle",
    "PretrainConfig",
    "PseudoLabelBatch",
    "RunConfig",
    "SegNetConfig",
    "SegNetOutput",
    "StplStage",
    "Subject",
    "SynthConfig",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "VARIANTS",
    "ValidationError",
    "VariantConfig",
    "VolumeFormatError",
    "aggregate",
    "assd",
    "build_bundle",
    "build_critic",
    "build_segnet",
    "compose_total",
    "compute_affinity",
    "compute_metrics",
    "critic_loss",
    "dice_loss",
    "entropy_loss",
    "evaluate_subjects",
    "extract_network",
    "gen_adv_loss",
    "generate_synthetic",
    "load_config",
    "load_dataset",
    "load_pretrain_checkpoint",
    "load_uda_checkpoint",
    "load_volume",
    "low_signal_augment",
    "make_cv_splits",
    "mean_completer",
    "normal_pseudolabel",
    "pamr_loss",
    "predict_volume",
    "preprocess_ct",
    "preprocess_mr",
    "pretrain_source",
    "refine",
    "resolved_text",
    "run_ablation",
    "save_dataset",
    "save_pretrain_checkpoint",
    "save_uda_checkpoint",
    "share_and_freeze",
    "stpl_losses",
    "stpl_stage",
    "train_uda",
    "uda_step",
    "validation_dice",
    "variant_config",
    "weighted_self_information",
    "write_resolved",
]
