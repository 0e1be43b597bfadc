"""Named training settings: the full framework and its ablations.

Adversarial-manner settings (ISIM, PSIM/SA, SEA, SA+SEA) train only the
aligner U2 (plus critics) and report U2; ISIM moves the critic from the
aligner's output logits to its stem feature maps. Component ablations keep
the full pipeline and drop one ingredient each; "with PP" trains the full
framework and only changes evaluation (mask refinement as post-processing).
"""

from dataclasses import replace

from .errors import ConfigError
from .training import (
    TrainConfig,
    VariantConfig,
    build_bundle,
    evaluate_subjects,
    load_pretrain_checkpoint,
    train_uda,
    input_transform,
)

_U2_ONLY = dict(
    use_u3=False, use_u4=False, use_pamr=False, use_entropy=False,
    use_mean_completer=False, stage_switch=False, reported_network="U2",
)

VARIANTS = {
    "Proposed": VariantConfig(),
    "ISIM": VariantConfig(
        name="ISIM", adv_semantic=False, adv_shape=False, adv_stem=True,
        **_U2_ONLY,
    ),
    "PSIM": VariantConfig(name="PSIM", adv_shape=False, **_U2_ONLY),
    "SEA": VariantConfig(name="SEA", adv_semantic=False, **_U2_ONLY),
    "SA+SEA": VariantConfig(name="SA+SEA", **_U2_ONLY),
    "w/o MCPLG": VariantConfig(name="w/o MCPLG", use_mean_completer=False),
    "w/o LSAF": VariantConfig(name="w/o LSAF", use_lsaf=False),
    "with PP": VariantConfig(name="with PP", eval_post_process=True),
    "w/o PAMR": VariantConfig(name="w/o PAMR", use_pamr=False),
    "w/o STPL": VariantConfig(name="w/o STPL", use_u4=False, stage_switch=False),
    "with DML": VariantConfig(name="with DML", dml=True, stage_switch=False),
    "w/o SSL": VariantConfig(
        name="w/o SSL", use_u4=False, use_pamr=False, stage_switch=False
    ),
}
# "SA" is the semantic-alignment setting, same thing as PSIM standalone.
VARIANTS["SA"] = replace(VARIANTS["PSIM"], name="SA")


def variant_config(name) -> VariantConfig:
    if name not in VARIANTS:
        raise ConfigError(
            f"unknown variant {name!r}; choose from {sorted(VARIANTS)}"
        )
    return VARIANTS[name]


def run_ablation(name, bundle_cfg, train_cfg: TrainConfig, u1_checkpoint,
                 source_subjects, target_subjects, val_subjects, out_dir,
                 step_callback=None):
    """Train one named setting and evaluate its reported network.

    Returns (records, TrainResult): per-subject metric records of the
    variant's reported network on the validation subjects, evaluated with
    mask-refinement post-processing when the variant calls for it.
    """
    variant = variant_config(name)
    cfg = replace(train_cfg, variant=variant)
    bundle = build_bundle(bundle_cfg, variant, cfg.seed)
    load_pretrain_checkpoint(u1_checkpoint, bundle.u1)
    result = train_uda(
        bundle, source_subjects, target_subjects, cfg, out_dir,
        val_subjects=val_subjects, step_callback=step_callback,
    )
    reported = getattr(bundle, variant.reported_network.lower())
    transform = (
        input_transform(cfg) if variant.reported_network == "U3" else None
    )
    records = evaluate_subjects(
        reported, val_subjects, batch_size=cfg.val_batch_size,
        transform=transform,
        post_process="pamr" if variant.eval_post_process else None,
        pamr_kwargs={
            "iterations": cfg.pamr_iterations,
            "dilations": cfg.pamr_dilations,
            "squared": cfg.pamr_squared,
        },
    )
    return records, result
