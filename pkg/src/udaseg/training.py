"""Training orchestration: source pretraining, weight sharing/freezing, the
adversarial + self-learning adaptation step, and the full training loop.

One adaptation step works on one source batch and one equally sized target
batch: forward all nets, derive detached pseudo-labels (with mean completion
for hard samples) and the refined mask, update the critics on detached
generator outputs (then clip their weights), and finally update the
generators under the weighted composite objective with critic parameters
frozen. Critic loss terms are logged and enter the composed total, but never
backpropagate into generators.

The aligner U2 shares the source net U1's weights and trains only its first
convolution block; U1 and U2's remaining blocks stay frozen (parameters and
BatchNorm statistics both).
"""

import json
import logging
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import container
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    TrainingDivergedError,
    ValidationError,
)
from .losses import (
    LossWeights,
    compose_total,
    critic_loss,
    dice_loss,
    entropy_loss,
    gen_adv_loss,
)
from .metrics import compute_metrics
from .networks import (
    Critic,
    CriticConfig,
    SegNetConfig,
    build_critic,
    build_segnet,
)
from .pamr import refine
from .pseudo import detect_hard, mean_completer, normal_pseudolabel
from .signals import low_signal_augment, weighted_self_information
from .stpl import StplStage, stpl_losses, stpl_stage

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantConfig:
    """Which parts of the framework a training setting uses."""

    name: str = "Proposed"
    use_u3: bool = True
    use_u4: bool = True
    use_pamr: bool = True
    use_lsaf: bool = True
    use_mean_completer: bool = True
    use_entropy: bool = True
    adv_semantic: bool = True  # critic D1 on the aligner's logit maps
    adv_shape: bool = True  # critic D2 on the aligner's surprisal maps
    adv_stem: bool = False  # critic D3 on the aligner's stem features
    stage_switch: bool = True
    dml: bool = False
    eval_post_process: bool = False
    reported_network: str = "U3"


@dataclass(frozen=True)
class BundleConfig:
    image_size: int = 256
    in_channels: int = 1
    depth: int = 4
    base_u1: int = 64
    base_u2: int = 64
    base_u3: int = 32
    base_u4: int = 8
    critic_base: int = 64

    def segnet_config(self, which):
        base = getattr(self, f"base_{which}")
        return SegNetConfig(
            base_filters=base, in_channels=self.in_channels,
            out_channels=1, depth=self.depth,
        )

    def critic_config(self, in_channels=1):
        return CriticConfig(
            in_channels=in_channels,
            input_size=self.image_size,
            base_channels=self.critic_base,
        )


@dataclass
class ModelBundle:
    u1: object = None
    u2: object = None
    u3: object = None
    u4: object = None
    d1: object = None
    d2: object = None
    d3: object = None
    variant: VariantConfig = field(default_factory=VariantConfig)
    bundle_config: BundleConfig = field(default_factory=BundleConfig)

    def models(self):
        out = {}
        for name in ("u1", "u2", "u3", "u4", "d1", "d2", "d3"):
            model = getattr(self, name)
            if model is not None:
                out[name] = model
        return out

    def critics(self):
        return {k: v for k, v in self.models().items() if k in ("d1", "d2", "d3")}

    def generators(self):
        return {k: v for k, v in self.models().items() if k in ("u2", "u3", "u4")}

    def apply_training_modes(self):
        """U1 fully frozen; U2 trains its stem only; the rest train."""
        if self.u1 is not None:
            self.u1.eval()
        if self.u2 is not None:
            self.u2.eval()
            self.u2.enc_blocks[0].train()
        for name in ("u3", "u4", "d1", "d2", "d3"):
            model = getattr(self, name)
            if model is not None:
                model.train()


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    variant: VariantConfig = field(default_factory=VariantConfig)
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    lr_u2: float = 1e-4
    lr_u3: float = 1.2e-4
    lr_u4: float = 1.5e-4
    lr_d1: float = 2e-4
    lr_d2: float = 2e-4
    rmsprop_alpha: float = 0.9
    critic_update_ratio: int = 1
    clip_bound: float = 0.01
    lsaf_beta: float = 3.0
    pamr_iterations: int = 10
    pamr_dilations: tuple = (1, 2, 4, 8)
    pamr_squared: bool = True
    checkpoint_every: int = 0  # additionally checkpoint every N epochs
    val_batch_size: int = 16

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.critic_update_ratio < 1:
            raise ConfigError("critic_update_ratio must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.9
    seed: int = 0
    val_every: int = 1


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    history: dict
    out_dir: str


def build_bundle(bundle_cfg: BundleConfig, variant: VariantConfig, seed: int):
    """Build all networks a variant needs, deterministically seeded."""
    if bundle_cfg.base_u1 != bundle_cfg.base_u2:
        raise ConfigError("U1 and U2 must share a base filter count")
    bundle = ModelBundle(variant=variant, bundle_config=bundle_cfg)
    bundle.u1 = build_segnet(bundle_cfg.segnet_config("u1"), seed)
    bundle.u2 = build_segnet(bundle_cfg.segnet_config("u2"), seed + 1)
    if variant.use_u3:
        bundle.u3 = build_segnet(bundle_cfg.segnet_config("u3"), seed + 2)
    if variant.use_u4:
        bundle.u4 = build_segnet(bundle_cfg.segnet_config("u4"), seed + 3)
    if variant.adv_semantic or variant.use_u3:
        bundle.d1 = build_critic(bundle_cfg.critic_config(1), seed + 4)
    if variant.adv_shape:
        bundle.d2 = build_critic(bundle_cfg.critic_config(1), seed + 5)
    if variant.adv_stem:
        bundle.d3 = build_critic(
            bundle_cfg.critic_config(bundle_cfg.base_u2), seed + 6
        )
    return bundle


def share_and_freeze(u1, u2):
    """Copy U1's weights into U2, freeze U1 entirely and U2 outside its stem.

    Returns the list of U2 parameter names left trainable (the stem).
    """
    if u1.cfg != u2.cfg:
        raise ConfigError(
            f"cannot share weights between configs {u1.cfg} and {u2.cfg}"
        )
    u2.load_state_dict(u1.state_dict())
    for p in u1.parameters():
        p.requires_grad_(False)
    u1.eval()
    stem_names = set(u2.stem_parameter_names())
    for name, p in u2.named_parameters():
        p.requires_grad_(name in stem_names)
    u2.eval()
    u2.enc_blocks[0].train()
    return sorted(stem_names)


def build_optimizers(bundle: ModelBundle, cfg: TrainConfig):
    opts = {}
    if bundle.u2 is not None:
        opts["u2"] = torch.optim.RMSprop(
            bundle.u2.enc_blocks[0].parameters(),
            lr=cfg.lr_u2, alpha=cfg.rmsprop_alpha,
        )
    if bundle.u3 is not None:
        opts["u3"] = torch.optim.RMSprop(
            bundle.u3.parameters(), lr=cfg.lr_u3, alpha=cfg.rmsprop_alpha
        )
    if bundle.u4 is not None:
        opts["u4"] = torch.optim.RMSprop(
            bundle.u4.parameters(), lr=cfg.lr_u4, alpha=cfg.rmsprop_alpha
        )
    for name, lr in (("d1", cfg.lr_d1), ("d2", cfg.lr_d2), ("d3", cfg.lr_d1)):
        model = getattr(bundle, name)
        if model is not None:
            opts[name] = torch.optim.RMSprop(
                model.parameters(), lr=lr, alpha=cfg.rmsprop_alpha
            )
    return opts


def clip_critic_(model: Critic, bound: float):
    """WGAN weight clipping applied to every critic parameter."""
    with torch.no_grad():
        for p in model.parameters():
            p.clamp_(-bound, bound)


def _set_requires_grad(model, flag):
    for p in model.parameters():
        p.requires_grad_(flag)


# ---------------------------------------------------------------------------
# Pretraining


def _stack_slices(subjects, require_labels=True):
    images = np.concatenate([s.images for s in subjects], axis=0)
    labels = None
    if require_labels:
        if any(s.labels is None for s in subjects):
            raise ValidationError("all subjects need labels here")
        labels = np.concatenate([s.labels for s in subjects], axis=0)
    return images, labels


def _log_record(fh, record):
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def pretrain_source(model, subjects, cfg: PretrainConfig, out_dir,
                    val_subjects=None):
    """Supervised Dice training of the source net; saves a checkpoint.

    Adam with the learning rate decaying by cfg.lr_decay after every epoch;
    shuffling is driven by a dedicated seeded generator.
    """
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "pretrain_log.jsonl")
    images, labels = _stack_slices(subjects)
    images_t = torch.from_numpy(images)[:, None]
    labels_t = torch.from_numpy(labels.astype(np.float32))[:, None]
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=cfg.lr_decay)
    history = {"U1": []}
    with open(log_path, "w") as fh:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(images_t))
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
                x = images_t[idx]
                y = labels_t[idx]
                optimizer.zero_grad()
                logits = model(x).logits
                loss = dice_loss(torch.sigmoid(logits), y)
                loss.backward()
                optimizer.step()
                _log_record(fh, {
                    "kind": "step", "phase": "pretrain", "epoch": epoch,
                    "iteration": n_batches, "dice_loss": float(loss.item()),
                })
                epoch_loss += float(loss.item())
                n_batches += 1
            lr_now = optimizer.param_groups[0]["lr"]
            _log_record(fh, {
                "kind": "epoch", "phase": "pretrain", "epoch": epoch,
                "lr": lr_now, "mean_dice_loss": epoch_loss / max(n_batches, 1),
            })
            if val_subjects and (epoch % cfg.val_every == 0
                                 or epoch == cfg.epochs - 1):
                dice = validation_dice(model, val_subjects, batch_size=16)
                history["U1"].append(dice)
                _log_record(fh, {
                    "kind": "val", "epoch": epoch, "network": "U1", "dice": dice,
                })
            scheduler.step()
    ckpt_path = os.path.join(out_dir, "u1_pretrained.ckpt")
    save_pretrain_checkpoint(ckpt_path, model, cfg)
    return TrainResult(
        checkpoint_path=ckpt_path, log_path=log_path, history=history,
        out_dir=out_dir,
    )


def validation_dice(model, subjects, batch_size=16, transform=None):
    """Mean per-subject hard Dice of thresholded predictions."""
    was_training = model.training
    model.eval()
    dices = []
    with torch.no_grad():
        for sub in subjects:
            if sub.labels is None:
                raise ValidationError(f"subject {sub.subject_id} has no labels")
            preds = predict_volume(model, sub, batch_size, transform)
            gt = sub.labels.astype(bool)
            tp = int(np.count_nonzero(preds & gt))
            fp = int(np.count_nonzero(preds & ~gt))
            fn = int(np.count_nonzero(~preds & gt))
            denom = 2 * tp + fp + fn
            dices.append((2.0 * tp / denom) if denom else 0.0)
    if was_training:
        model.train()
    return float(np.mean(dices))


def predict_volume(model, subject, batch_size=16, transform=None,
                   post_process=None, pamr_kwargs=None):
    """Thresholded prediction volume (bool (n, H, W)) for one subject."""
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        images = torch.from_numpy(subject.images)[:, None]
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size]
            if transform is not None:
                x = transform(x)
            logits = model(x).logits
            if post_process == "pamr":
                probs = torch.sigmoid(logits)
                refined = refine(probs, x, **(pamr_kwargs or {}))
                chunks.append((refined.probs > 0.5)[:, 0].numpy())
            else:
                chunks.append((logits > 0)[:, 0].numpy())
    if was_training:
        model.train()
    return np.concatenate(chunks, axis=0).astype(bool)


def evaluate_subjects(model, subjects, batch_size=16, transform=None,
                      post_process=None, pamr_kwargs=None):
    """Per-subject metric records for labeled subjects."""
    records = []
    for sub in subjects:
        if sub.labels is None:
            raise ValidationError(f"subject {sub.subject_id} has no labels")
        pred = predict_volume(
            model, sub, batch_size, transform, post_process, pamr_kwargs
        )
        records.append(
            compute_metrics(
                pred.astype(np.uint8), sub.labels, sub.spacing, sub.subject_id
            )
        )
    return records


# ---------------------------------------------------------------------------
# Adaptation


def input_transform(cfg: TrainConfig):
    if not cfg.variant.use_lsaf:
        return lambda x: x
    return lambda x: low_signal_augment(x, cfg.lsaf_beta)


def uda_step(bundle: ModelBundle, optimizers, source_batch, target_batch,
             cfg: TrainConfig, epoch: int):
    """One adaptation step on one source batch and one target batch.

    Returns (LossBreakdown, info dict). Critic updates run first (on
    detached generator outputs, followed by weight clipping), then one
    generator update with critic parameters frozen.
    """
    xs, ys = source_batch
    xt = target_batch
    if xs.shape[0] != xt.shape[0]:
        raise ValidationError(
            f"source batch {xs.shape[0]} != target batch {xt.shape[0]}"
        )
    variant = bundle.variant
    w = cfg.weights
    epoch_w = epoch if variant.stage_switch else 0
    transform = input_transform(cfg)
    xt_prime = transform(xt)

    with torch.no_grad():
        out1 = bundle.u1(xs)
        o1 = out1.logits
        f1 = out1.stem_features if variant.adv_stem else None
        q1 = weighted_self_information(torch.sigmoid(o1)) if variant.adv_shape \
            else None

    out2 = bundle.u2(xt)
    o2t, f2t = out2.logits, out2.stem_features
    o2s = bundle.u2(xs).logits
    o3 = bundle.u3(xt_prime).logits if variant.use_u3 else None
    u4_input = xt_prime if variant.dml else xt
    o4 = bundle.u4(u4_input).logits if variant.use_u4 else None

    # Pseudo-labels (always detached).
    if variant.use_mean_completer:
        pl = mean_completer(o2t)
        y2, hard = pl.masks, pl.hard_flags
    else:
        y2 = normal_pseudolabel(o2t)
        hard = detect_hard(y2)
    y3 = normal_pseudolabel(o3) if o3 is not None else None
    y4 = normal_pseudolabel(o4) if o4 is not None else None
    y3_refined = None
    if variant.use_pamr:
        y3_refined = refine(
            torch.sigmoid(o3).detach(), xt_prime,
            iterations=cfg.pamr_iterations, dilations=cfg.pamr_dilations,
            squared=cfg.pamr_squared,
        ).pseudo

    parts = {}

    # Critic phase: detached generator outputs, then clip.
    for _ in range(cfg.critic_update_ratio):
        if bundle.d1 is not None:
            optimizers["d1"].zero_grad()
            s1 = bundle.d1(o1)
            loss_d1 = None
            if variant.adv_semantic:
                c = critic_loss(s1, bundle.d1(o2t.detach()))
                parts["critic_d1_o2"] = float(c.item())
                loss_d1 = w.critic_d1_o2 * c
            if o3 is not None:
                c = critic_loss(s1, bundle.d1(o3.detach()))
                parts["critic_d1_o3"] = float(c.item())
                term = w.critic_d1_o3 * c
                loss_d1 = term if loss_d1 is None else loss_d1 + term
            if loss_d1 is not None:
                loss_d1.backward()
                optimizers["d1"].step()
            clip_critic_(bundle.d1, cfg.clip_bound)
        if bundle.d2 is not None:
            optimizers["d2"].zero_grad()
            q2 = weighted_self_information(torch.sigmoid(o2t.detach()))
            c = critic_loss(bundle.d2(q1), bundle.d2(q2))
            parts["critic_d2_q2"] = float(c.item())
            (w.critic_d2_q2 * c).backward()
            optimizers["d2"].step()
            clip_critic_(bundle.d2, cfg.clip_bound)
        if bundle.d3 is not None:
            optimizers["d3"].zero_grad()
            c = critic_loss(bundle.d3(f1), bundle.d3(f2t.detach()))
            parts["critic_d3_f2"] = float(c.item())
            (w.critic_d3_f2 * c).backward()
            optimizers["d3"].step()
            clip_critic_(bundle.d3, cfg.clip_bound)

    # Generator phase: critics frozen, only generator terms backpropagate.
    for critic in bundle.critics().values():
        _set_requires_grad(critic, False)
    for name in ("u2", "u3", "u4"):
        if name in optimizers:
            optimizers[name].zero_grad()

    gen_terms = []

    def add(term, value, weight):
        parts[term] = float(value.item())
        if weight != 0.0:
            gen_terms.append(weight * value)

    add("seg_source", dice_loss(torch.sigmoid(o2s), ys), w.seg_source)

    stage = stpl_stage(epoch, w.stage_switch_epoch) if variant.stage_switch \
        else StplStage.TEACHER_STUDENT
    u3_pseudo_source = None
    if o3 is not None:
        p3 = torch.sigmoid(o3)
        if variant.dml and o4 is not None:
            p4 = torch.sigmoid(o4)
            add("seg_u3", dice_loss(p3, y2) + dice_loss(p3, y4),
                w.value_for("seg_u3", epoch_w))
            add("seg_u4", dice_loss(p4, y3) + dice_loss(p4, y2), w.seg_u4)
            u3_pseudo_source = "u2+u4"
        elif o4 is not None:
            p4 = torch.sigmoid(o4)
            loss_u3, loss_u4 = stpl_losses(stage, p3, p4, y2, y3, y4)
            add("seg_u3", loss_u3, w.value_for("seg_u3", epoch_w))
            add("seg_u4", loss_u4, w.seg_u4)
            u3_pseudo_source = "u4" if stage is StplStage.PARTNERS else "u2"
        else:
            add("seg_u3", dice_loss(p3, y2), w.value_for("seg_u3", epoch_w))
            u3_pseudo_source = "u2"
        if y3_refined is not None:
            add("pamr", dice_loss(p3, y3_refined), w.pamr)
        if variant.use_entropy:
            add("entropy", entropy_loss(p3), w.entropy)
    if variant.adv_semantic:
        add("adv_gen_u2", gen_adv_loss(bundle.d1(o2t)), w.adv_gen_u2)
    if o3 is not None and bundle.d1 is not None:
        add("adv_gen_u3", gen_adv_loss(bundle.d1(o3)), w.adv_gen_u3)
    if variant.adv_shape:
        q2_live = weighted_self_information(torch.sigmoid(o2t))
        add("adv_gen_q2", gen_adv_loss(bundle.d2(q2_live)), w.adv_gen_q2)
    if variant.adv_stem:
        add("adv_gen_f2", gen_adv_loss(bundle.d3(f2t)), w.adv_gen_f2)

    for term, value in parts.items():
        if value != value:  # NaN
            raise TrainingDivergedError(term, epoch, -1)

    if gen_terms:
        total = gen_terms[0]
        for t in gen_terms[1:]:
            total = total + t
        total.backward()
        for name in ("u2", "u3", "u4"):
            if name in optimizers:
                optimizers[name].step()
    for critic in bundle.critics().values():
        _set_requires_grad(critic, True)

    breakdown = compose_total(parts, w, epoch_w)
    info = {
        "stage": stage.value,
        "u3_pseudo_source": u3_pseudo_source,
        "hard_samples": int(hard.sum().item()),
        "seg_u3_weight": w.value_for("seg_u3", epoch_w),
    }
    return breakdown, info


# ---------------------------------------------------------------------------
# Checkpointing

def _encode_state(obj, arrays, prefix, counter):
    """Recursively encode dict/list/tensor structures into JSON + arrays."""
    if torch.is_tensor(obj):
        key = f"{prefix}.{counter[0]}"
        counter[0] += 1
        arrays[key] = obj.detach().cpu().numpy()
        return {"__kind__": "tensor", "key": key}
    if isinstance(obj, dict):
        return {
            "__kind__": "dict",
            "items": [
                [_encode_state(k, arrays, prefix, counter),
                 _encode_state(v, arrays, prefix, counter)]
                for k, v in obj.items()
            ],
        }
    if isinstance(obj, (list, tuple)):
        return {
            "__kind__": "list" if isinstance(obj, list) else "tuple",
            "items": [_encode_state(v, arrays, prefix, counter) for v in obj],
        }
    if isinstance(obj, (int, float, str, bool)) or obj is None:
        return {"__kind__": "scalar", "value": obj}
    raise ValidationError(f"cannot serialize state element of type {type(obj)}")


def _decode_state(spec, arrays):
    kind = spec["__kind__"]
    if kind == "tensor":
        return torch.from_numpy(arrays[spec["key"]].copy())
    if kind == "dict":
        return {
            _decode_state(k, arrays): _decode_state(v, arrays)
            for k, v in spec["items"]
        }
    if kind == "list":
        return [_decode_state(v, arrays) for v in spec["items"]]
    if kind == "tuple":
        return tuple(_decode_state(v, arrays) for v in spec["items"])
    return spec["value"]


def _model_config_dict(model):
    return asdict(model.cfg)


def save_pretrain_checkpoint(path, model, cfg: PretrainConfig):
    arrays = {}
    for name, tensor in model.state_dict().items():
        arrays[f"model.u1.{name}"] = tensor.detach().cpu().numpy()
    meta = {
        "kind": "pretrain_checkpoint",
        "config": _model_config_dict(model),
        "pretrain": asdict(cfg),
        "seed": cfg.seed,
    }
    return container.write_container(path, meta, arrays)


def load_pretrain_checkpoint(path, model):
    meta, arrays = container.read_container(path)
    if meta.get("kind") != "pretrain_checkpoint":
        raise CheckpointMismatchError(f"not a pretraining checkpoint: {path}")
    if meta["config"] != _model_config_dict(model):
        raise CheckpointMismatchError(
            f"checkpoint config {meta['config']} does not match model config "
            f"{_model_config_dict(model)}"
        )
    state = {}
    prefix = "model.u1."
    for key, arr in arrays.items():
        if key.startswith(prefix):
            state[key[len(prefix):]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return meta


def _config_snapshot(cfg: TrainConfig):
    snap = asdict(cfg)
    snap["pamr_dilations"] = list(cfg.pamr_dilations)
    return snap


def save_uda_checkpoint(path, bundle: ModelBundle, optimizers, cfg: TrainConfig,
                        epoch, rng, extra=None):
    arrays = {}
    model_configs = {}
    for name, model in bundle.models().items():
        model_configs[name] = _model_config_dict(model)
        for pname, tensor in model.state_dict().items():
            arrays[f"model.{name}.{pname}"] = tensor.detach().cpu().numpy()
    optim_specs = {}
    for name, opt in optimizers.items():
        counter = [0]
        optim_specs[name] = _encode_state(
            opt.state_dict(), arrays, f"optim.{name}", counter
        )
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    meta = {
        "kind": "uda_checkpoint",
        "epoch": epoch,
        "variant": bundle.variant.name,
        "bundle_config": asdict(bundle.bundle_config),
        "model_configs": model_configs,
        "train_config": _config_snapshot(cfg),
        "optimizers": optim_specs,
        "rng_numpy": rng.bit_generator.state,
        "seed": cfg.seed,
        "extra": extra or {},
    }
    return container.write_container(path, meta, arrays)


def load_uda_checkpoint(path, bundle: ModelBundle, optimizers=None):
    """Restore models (and optionally optimizer/rng state); returns meta."""
    meta, arrays = container.read_container(path)
    if meta.get("kind") != "uda_checkpoint":
        raise CheckpointMismatchError(f"not an adaptation checkpoint: {path}")
    models = bundle.models()
    if set(meta["model_configs"]) != set(models):
        raise CheckpointMismatchError(
            f"checkpoint has networks {sorted(meta['model_configs'])}, bundle "
            f"has {sorted(models)}"
        )
    for name, model in models.items():
        if meta["model_configs"][name] != _model_config_dict(model):
            raise CheckpointMismatchError(
                f"network {name}: checkpoint config "
                f"{meta['model_configs'][name]} != model config "
                f"{_model_config_dict(model)}"
            )
        prefix = f"model.{name}."
        state = {
            key[len(prefix):]: torch.from_numpy(arr.copy())
            for key, arr in arrays.items()
            if key.startswith(prefix)
        }
        model.load_state_dict(state)
    if optimizers is not None:
        for name, opt in optimizers.items():
            if name not in meta["optimizers"]:
                raise CheckpointMismatchError(f"no optimizer state for {name}")
            opt.load_state_dict(_decode_state(meta["optimizers"][name], arrays))
    return meta, arrays


def extract_network(path, which, bundle_cfg=None):
    """Build and load one segmentation net from any checkpoint kind."""
    meta, arrays = container.read_container(path)
    which = which.lower()
    if which not in ("u1", "u2", "u3", "u4"):
        raise CheckpointMismatchError(
            f"can only extract segmentation networks, asked for {which}"
        )
    if meta.get("kind") == "pretrain_checkpoint":
        if which != "u1":
            raise CheckpointMismatchError(
                f"pretraining checkpoint only holds u1, asked for {which}"
            )
        cfg = SegNetConfig(**meta["config"])
        model = build_segnet(cfg, meta.get("seed", 0))
        prefix = "model.u1."
    elif meta.get("kind") == "uda_checkpoint":
        if which not in meta["model_configs"]:
            raise CheckpointMismatchError(
                f"checkpoint has no network {which}; it holds "
                f"{sorted(meta['model_configs'])}"
            )
        cfg = SegNetConfig(**meta["model_configs"][which])
        model = build_segnet(cfg, meta.get("seed", 0))
        prefix = f"model.{which}."
    else:
        raise CheckpointMismatchError(f"unrecognized checkpoint kind in {path}")
    state = {
        key[len(prefix):]: torch.from_numpy(arr.copy())
        for key, arr in arrays.items()
        if key.startswith(prefix)
    }
    model.load_state_dict(state)
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# The adaptation loop


def train_uda(bundle: ModelBundle, source_subjects, target_subjects, cfg: TrainConfig,
              out_dir, val_subjects=None, resume_from=None, step_callback=None):
    """Adversarial + self-learning adaptation over unlabeled target slices.

    One epoch is one pass over the target training slices (shuffled,
    incomplete trailing batch dropped); source batches are drawn with
    replacement. Validation (if val_subjects given) runs every epoch on a
    read-only snapshot. Checkpoints carry models, optimizers, and RNG state,
    so an interrupted run resumes exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")

    share_and_freeze(bundle.u1, bundle.u2)
    optimizers = build_optimizers(bundle, cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    torch.manual_seed(cfg.seed)

    history = {name.upper(): [] for name in bundle.generators()}
    start_epoch = 0
    if resume_from is not None:
        meta, arrays = load_uda_checkpoint(resume_from, bundle, optimizers)
        start_epoch = meta["epoch"]
        rng.bit_generator.state = meta["rng_numpy"]
        if "rng.torch" in arrays:
            torch.set_rng_state(torch.from_numpy(arrays["rng.torch"].copy()))
        history = meta["extra"].get("history", history)
        # Freeze flags are not serialized; reapply the contract after loading.
        for p in bundle.u1.parameters():
            p.requires_grad_(False)
        stem = set(bundle.u2.stem_parameter_names())
        for name, p in bundle.u2.named_parameters():
            p.requires_grad_(name in stem)

    src_images, src_labels = _stack_slices(source_subjects)
    tgt_images, _ = _stack_slices(target_subjects, require_labels=False)
    src_images_t = torch.from_numpy(src_images)[:, None]
    src_labels_t = torch.from_numpy(src_labels.astype(np.float32))[:, None]
    tgt_images_t = torch.from_numpy(tgt_images)[:, None]
    if len(tgt_images_t) < cfg.batch_size:
        raise ValidationError(
            f"need at least {cfg.batch_size} target slices, got "
            f"{len(tgt_images_t)}"
        )

    transform = input_transform(cfg)
    mode = "a" if start_epoch > 0 else "w"
    final_path = os.path.join(out_dir, "final.ckpt")
    prev_stage = None
    with open(log_path, mode) as fh:
        if start_epoch == 0:
            _log_record(fh, {
                "kind": "run", "variant": bundle.variant.name,
                "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                "seed": cfg.seed,
                "stage_switch_epoch": cfg.weights.stage_switch_epoch,
            })
        for epoch in range(start_epoch, cfg.epochs):
            bundle.apply_training_modes()
            stage = (stpl_stage(epoch, cfg.weights.stage_switch_epoch)
                     if bundle.variant.stage_switch else StplStage.TEACHER_STUDENT)
            if stage != prev_stage:
                _log_record(fh, {
                    "kind": "stage", "epoch": epoch, "stage": stage.value,
                })
                prev_stage = stage
            order = rng.permutation(len(tgt_images_t))
            n_steps = len(order) // cfg.batch_size
            hard_total = 0
            for it in range(n_steps):
                t_idx = torch.from_numpy(
                    order[it * cfg.batch_size : (it + 1) * cfg.batch_size].copy()
                )
                s_idx = torch.from_numpy(
                    rng.integers(0, len(src_images_t), size=cfg.batch_size)
                )
                source_batch = (src_images_t[s_idx], src_labels_t[s_idx])
                try:
                    breakdown, info = uda_step(
                        bundle, optimizers, source_batch, tgt_images_t[t_idx],
                        cfg, epoch,
                    )
                except TrainingDivergedError as err:
                    _log_record(fh, {
                        "kind": "diverged", "epoch": epoch, "iteration": it,
                        "term": err.term,
                    })
                    raise
                hard_total += info["hard_samples"]
                record = {
                    "kind": "step", "epoch": epoch, "iteration": it,
                    "stage": info["stage"],
                    "u3_pseudo_source": info["u3_pseudo_source"],
                    "seg_u3_weight": info["seg_u3_weight"],
                    "hard_samples": info["hard_samples"],
                    "terms": breakdown.active_terms(),
                    "total": breakdown.total,
                }
                _log_record(fh, record)
                if step_callback is not None:
                    step_callback(bundle, breakdown, record)
            _log_record(fh, {
                "kind": "epoch", "epoch": epoch, "steps": n_steps,
                "hard_samples": hard_total,
            })
            if val_subjects:
                for name, model in sorted(bundle.generators().items()):
                    dice = validation_dice(
                        model, val_subjects, cfg.val_batch_size,
                        transform if name == "u3" else None,
                    )
                    history[name.upper()].append(dice)
                    _log_record(fh, {
                        "kind": "val", "epoch": epoch,
                        "network": name.upper(), "dice": dice,
                    })
                bundle.apply_training_modes()
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 \
                    and (epoch + 1) < cfg.epochs:
                ck = os.path.join(out_dir, f"epoch_{epoch + 1:04d}.ckpt")
                save_uda_checkpoint(
                    ck, bundle, optimizers, cfg, epoch + 1, rng,
                    extra={"history": history, "torch_rng_in_arrays": True},
                )
                _log_record(fh, {
                    "kind": "checkpoint", "epoch": epoch + 1,
                    "path": os.path.basename(ck),
                })
        save_uda_checkpoint(
            final_path, bundle, optimizers, cfg, cfg.epochs, rng,
            extra={"history": history, "torch_rng_in_arrays": True},
        )
        _log_record(fh, {
            "kind": "checkpoint", "epoch": cfg.epochs,
            "path": os.path.basename(final_path),
        })
    return TrainResult(
        checkpoint_path=final_path, log_path=log_path, history=history,
        out_dir=out_dir,
    )
