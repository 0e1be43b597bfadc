"""Training mechanics: pretraining schedule, weight sharing and freezing,
critic clipping, gradient routing, stage switching, checkpoint resume."""

import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn as nn

from udaseg import container
from udaseg.ablation import VARIANTS, variant_config
from udaseg.data import Subject, SynthConfig, generate_synthetic
from udaseg.errors import (
    CheckpointMismatchError,
    ConfigError,
    TrainingDivergedError,
    ValidationError,
)
from udaseg.losses import TERM_ORDER, LossWeights
from udaseg.networks import SegNetConfig, build_segnet
from udaseg.training import (
    BundleConfig,
    PretrainConfig,
    TrainConfig,
    build_bundle,
    build_optimizers,
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

BUNDLE_CFG = BundleConfig(
    image_size=64, depth=4, base_u1=4, base_u2=4, base_u3=4, base_u4=4,
    critic_base=4,
)

ZERO_WEIGHT_FIELDS = dict(
    seg_source=0.0, seg_u3=0.0, seg_u3_stage2=0.0, seg_u4=0.0, pamr=0.0,
    critic_d1_o2=0.0, adv_gen_u2=0.0, critic_d1_o3=0.0, adv_gen_u3=0.0,
    critic_d2_q2=0.0, adv_gen_q2=0.0, entropy=0.0, critic_d3_f2=0.0,
    adv_gen_f2=0.0,
)


def only_weights(**overrides):
    merged = dict(ZERO_WEIGHT_FIELDS)
    merged.update(overrides)
    return LossWeights(**merged)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=4, seed=0, pamr_iterations=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    cfg = SynthConfig(image_size=64, n_source=2, n_target=2,
                      slices_per_subject=4, hard_fraction=0.0, seed=0)
    return generate_synthetic(cfg)


def make_batches(corpus, n=4):
    source, target = corpus
    xs = torch.from_numpy(
        np.concatenate([s.images for s in source], axis=0)[:n, None]
    )
    ys = torch.from_numpy(
        np.concatenate([s.labels for s in source], axis=0)
        .astype(np.float32)[:n, None]
    )
    xt = torch.from_numpy(
        np.concatenate([t.images for t in target], axis=0)[:n, None]
    )
    return (xs, ys), xt


def fresh_setup(variant_name="Proposed", weights=None, seed=0, **cfg_kw):
    variant = variant_config(variant_name)
    cfg = tiny_cfg(variant=variant, seed=seed, **cfg_kw)
    if weights is not None:
        cfg = TrainConfig(**{**cfg.__dict__, "weights": weights})
    bundle = build_bundle(BUNDLE_CFG, variant, seed)
    share_and_freeze(bundle.u1, bundle.u2)
    optimizers = build_optimizers(bundle, cfg)
    return bundle, optimizers, cfg


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def critic_params_within(bundle, bound, tol=1e-7):
    for critic in bundle.critics().values():
        for p in critic.parameters():
            if p.abs().max().item() > bound + tol:
                return False
    return True


class TestPretrain:
    def test_lr_decays_per_epoch(self, corpus, tmp_path):
        source, _ = corpus
        model = build_segnet(BUNDLE_CFG.segnet_config("u1"), 0)
        cfg = PretrainConfig(epochs=3, batch_size=4, lr=1e-3, lr_decay=0.9,
                             seed=0)
        result = pretrain_source(model, source, cfg, tmp_path / "run")
        epochs = [r for r in read_log(result.log_path) if r["kind"] == "epoch"]
        lrs = [r["lr"] for r in epochs]
        assert lrs == pytest.approx([1e-3, 9e-4, 8.1e-4], rel=1e-9)

    def test_validation_history_recorded(self, corpus, tmp_path):
        source, _ = corpus
        model = build_segnet(BUNDLE_CFG.segnet_config("u1"), 0)
        cfg = PretrainConfig(epochs=2, batch_size=4, seed=0)
        result = pretrain_source(model, source, cfg, tmp_path / "run",
                                 val_subjects=source)
        assert len(result.history["U1"]) == 2
        vals = [r for r in read_log(result.log_path) if r["kind"] == "val"]
        assert [v["network"] for v in vals] == ["U1", "U1"]
        assert all(0.0 <= v["dice"] <= 1.0 for v in vals)

    def test_checkpoint_bitwise_deterministic(self, corpus, tmp_path):
        source, _ = corpus
        cfg = PretrainConfig(epochs=2, batch_size=4, seed=3)
        paths = []
        for tag in ("a", "b"):
            model = build_segnet(BUNDLE_CFG.segnet_config("u1"), 3)
            result = pretrain_source(model, source, cfg, tmp_path / tag)
            paths.append(result.checkpoint_path)
        with open(paths[0], "rb") as f1, open(paths[1], "rb") as f2:
            assert f1.read() == f2.read()

    def test_checkpoint_round_trip_and_mismatch(self, corpus, tmp_path):
        source, _ = corpus
        model = build_segnet(BUNDLE_CFG.segnet_config("u1"), 0)
        cfg = PretrainConfig(epochs=1, batch_size=4, seed=0)
        result = pretrain_source(model, source, cfg, tmp_path / "run")
        clone = build_segnet(BUNDLE_CFG.segnet_config("u1"), 99)
        load_pretrain_checkpoint(result.checkpoint_path, clone)
        for k, v in model.state_dict().items():
            assert torch.equal(clone.state_dict()[k], v), k
        other = build_segnet(SegNetConfig(base_filters=8), 0)
        with pytest.raises(CheckpointMismatchError):
            load_pretrain_checkpoint(result.checkpoint_path, other)


class TestShareAndFreeze:
    def test_weights_copied_and_flags_set(self):
        u1 = build_segnet(BUNDLE_CFG.segnet_config("u1"), 0)
        u2 = build_segnet(BUNDLE_CFG.segnet_config("u2"), 1)
        trainable = share_and_freeze(u1, u2)
        for k, v in u1.state_dict().items():
            assert torch.equal(u2.state_dict()[k], v), k
        assert all(not p.requires_grad for p in u1.parameters())
        for name, p in u2.named_parameters():
            assert p.requires_grad == name.startswith("enc_blocks.0."), name
        assert trainable == sorted(u2.stem_parameter_names())
        assert trainable and all(
            n.startswith("enc_blocks.0.") for n in trainable
        )
        assert not u1.training
        assert u2.enc_blocks[0].training
        assert not u2.enc_blocks[1].training

    def test_config_mismatch_rejected(self):
        u1 = build_segnet(SegNetConfig(base_filters=4), 0)
        u2 = build_segnet(SegNetConfig(base_filters=8), 0)
        with pytest.raises(ConfigError):
            share_and_freeze(u1, u2)


class TestBuildBundle:
    def test_full_framework_networks(self):
        bundle = build_bundle(BUNDLE_CFG, variant_config("Proposed"), 0)
        names = set(bundle.models())
        assert names == {"u1", "u2", "u3", "u4", "d1", "d2"}
        assert set(bundle.critics()) == {"d1", "d2"}
        assert set(bundle.generators()) == {"u2", "u3", "u4"}

    def test_stem_alignment_networks(self):
        bundle = build_bundle(BUNDLE_CFG, variant_config("ISIM"), 0)
        assert set(bundle.models()) == {"u1", "u2", "d3"}
        assert bundle.d3.cfg.in_channels == BUNDLE_CFG.base_u2

    def test_mismatched_aligner_base_rejected(self):
        bad = BundleConfig(image_size=64, base_u1=4, base_u2=8, base_u3=4,
                           base_u4=4, critic_base=4)
        with pytest.raises(ConfigError):
            build_bundle(bad, variant_config("Proposed"), 0)


class TestUdaStep:
    def test_critics_clipped_after_every_step(self, corpus):
        bundle, optimizers, cfg = fresh_setup()
        source_batch, xt = make_batches(corpus)
        for step in range(3):
            uda_step(bundle, optimizers, source_batch, xt, cfg, epoch=0)
            assert critic_params_within(bundle, cfg.clip_bound), step

    def test_source_term_reaches_only_aligner_stem(self, corpus):
        weights = only_weights(seg_source=1.0)
        bundle, optimizers, cfg = fresh_setup(weights=weights)
        source_batch, xt = make_batches(corpus)
        uda_step(bundle, optimizers, source_batch, xt, cfg, epoch=0)
        stem = set(bundle.u2.stem_parameter_names())
        saw_stem_grad = False
        for name, p in bundle.u2.named_parameters():
            if name in stem:
                if p.grad is not None and p.grad.abs().sum() > 0:
                    saw_stem_grad = True
            else:
                assert p.grad is None, name
        assert saw_stem_grad
        for net in (bundle.u3, bundle.u4):
            for name, p in net.named_parameters():
                assert p.grad is None or p.grad.abs().sum() == 0, name

    def test_entropy_term_reaches_only_u3(self, corpus):
        weights = only_weights(entropy=1.0)
        bundle, optimizers, cfg = fresh_setup(weights=weights)
        source_batch, xt = make_batches(corpus)
        uda_step(bundle, optimizers, source_batch, xt, cfg, epoch=0)
        assert any(
            p.grad is not None and p.grad.abs().sum() > 0
            for p in bundle.u3.parameters()
        )
        for name, p in bundle.u2.named_parameters():
            assert p.grad is None or p.grad.abs().sum() == 0, name

    def test_generator_phase_leaves_critics_untouched(self, corpus):
        weights = only_weights(
            seg_source=1.0, seg_u3=1.0, seg_u4=1.0, pamr=1.0,
            adv_gen_u2=1.0, adv_gen_u3=1.0, adv_gen_q2=1.0, entropy=1.0,
        )
        bundle, optimizers, cfg = fresh_setup(weights=weights)
        source_batch, xt = make_batches(corpus)
        uda_step(bundle, optimizers, source_batch, xt, cfg, epoch=0)
        # Parameters only: BatchNorm running stats move with any train-mode
        # forward pass, which is not a gradient update.
        before = {
            name: {k: v.detach().clone()
                   for k, v in critic.named_parameters()}
            for name, critic in bundle.critics().items()
        }
        stem_before = [
            p.detach().clone()
            for p in bundle.u2.enc_blocks[0].parameters()
        ]
        uda_step(bundle, optimizers, source_batch, xt, cfg, epoch=0)
        for name, critic in bundle.critics().items():
            for k, v in critic.named_parameters():
                assert torch.equal(before[name][k], v), (name, k)
        stem_after = list(bundle.u2.enc_blocks[0].parameters())
        assert any(
            not torch.equal(a, b.detach())
            for a, b in zip(stem_before, stem_after)
        )

    def test_nan_input_raises_named_divergence(self, corpus):
        bundle, optimizers, cfg = fresh_setup()
        (xs, ys), xt = make_batches(corpus)
        xs = xs.clone()
        xs[0, 0, 0, 0] = float("nan")
        with pytest.raises(TrainingDivergedError) as err:
            uda_step(bundle, optimizers, (xs, ys), xt, cfg, epoch=2)
        assert err.value.term in TERM_ORDER
        assert err.value.epoch == 2
        assert "NaN" in str(err.value)

    def test_batch_size_mismatch_rejected(self, corpus):
        bundle, optimizers, cfg = fresh_setup()
        (xs, ys), xt = make_batches(corpus)
        with pytest.raises(ValidationError):
            uda_step(bundle, optimizers, (xs, ys), xt[:3], cfg, epoch=0)

    def test_stage_fields_flip_with_epoch(self, corpus):
        weights = LossWeights(stage_switch_epoch=3)
        bundle, optimizers, cfg = fresh_setup(weights=weights)
        source_batch, xt = make_batches(corpus)
        _, early = uda_step(bundle, optimizers, source_batch, xt, cfg, epoch=2)
        assert early["stage"] == "teacher_student"
        assert early["u3_pseudo_source"] == "u2"
        assert early["seg_u3_weight"] == 1.0
        _, late = uda_step(bundle, optimizers, source_batch, xt, cfg, epoch=3)
        assert late["stage"] == "partners"
        assert late["u3_pseudo_source"] == "u4"
        assert late["seg_u3_weight"] == 5.0

    def test_total_reconstructs_from_active_terms(self, corpus):
        bundle, optimizers, cfg = fresh_setup()
        source_batch, xt = make_batches(corpus)
        breakdown, _ = uda_step(bundle, optimizers, source_batch, xt, cfg,
                                epoch=0)
        total = 0.0
        for term in TERM_ORDER:
            value = getattr(breakdown, term)
            if value is not None:
                total += cfg.weights.value_for(term, 0) * value
        assert breakdown.total == total


class TestVariantBehavior:
    def variant_parts(self, corpus, name, epoch=0):
        bundle, optimizers, cfg = fresh_setup(variant_name=name)
        source_batch, xt = make_batches(corpus)
        breakdown, info = uda_step(bundle, optimizers, source_batch, xt, cfg,
                                   epoch=epoch)
        return set(breakdown.active_terms()), info, bundle

    def test_full_framework_terms(self, corpus):
        terms, _, _ = self.variant_parts(corpus, "Proposed")
        assert terms == {
            "seg_source", "seg_u3", "seg_u4", "pamr", "entropy",
            "critic_d1_o2", "adv_gen_u2", "critic_d1_o3", "adv_gen_u3",
            "critic_d2_q2", "adv_gen_q2",
        }

    def test_stem_alignment_terms(self, corpus):
        terms, _, bundle = self.variant_parts(corpus, "ISIM")
        assert terms == {"seg_source", "critic_d3_f2", "adv_gen_f2"}
        assert bundle.u3 is None and bundle.u4 is None

    def test_semantic_alignment_terms(self, corpus):
        terms, _, _ = self.variant_parts(corpus, "PSIM")
        assert terms == {"seg_source", "critic_d1_o2", "adv_gen_u2"}

    def test_shape_alignment_terms(self, corpus):
        terms, _, _ = self.variant_parts(corpus, "SEA")
        assert terms == {"seg_source", "critic_d2_q2", "adv_gen_q2"}

    def test_joint_alignment_terms(self, corpus):
        terms, _, _ = self.variant_parts(corpus, "SA+SEA")
        assert terms == {
            "seg_source", "critic_d1_o2", "adv_gen_u2",
            "critic_d2_q2", "adv_gen_q2",
        }

    def test_no_partner_variant_skips_u4_and_stays_stage1(self, corpus):
        terms, info, bundle = self.variant_parts(corpus, "w/o STPL",
                                                 epoch=500)
        assert "seg_u4" not in terms
        assert "seg_u3" in terms
        assert bundle.u4 is None
        assert info["stage"] == "teacher_student"
        assert info["seg_u3_weight"] == 1.0

    def test_no_selflearning_variant(self, corpus):
        terms, _, _ = self.variant_parts(corpus, "w/o SSL")
        assert "seg_u4" not in terms and "pamr" not in terms
        assert "seg_u3" in terms and "entropy" in terms

    def test_mutual_learning_uses_both_pseudolabels(self, corpus):
        terms, info, _ = self.variant_parts(corpus, "with DML")
        assert info["u3_pseudo_source"] == "u2+u4"
        assert "seg_u3" in terms and "seg_u4" in terms

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            variant_config("nonsense")

    def test_alias_setting(self):
        assert VARIANTS["SA"].adv_semantic and not VARIANTS["SA"].adv_shape
        assert VARIANTS["SA"].name == "SA"


class TestTrainLoop:
    def test_frozen_networks_never_move(self, corpus, tmp_path):
        source, target = corpus
        bundle, _, cfg = fresh_setup(epochs=1)
        u1_before = {k: v.clone() for k, v in bundle.u1.state_dict().items()}
        u2_before = {k: v.clone() for k, v in bundle.u2.state_dict().items()}
        train_uda(bundle, source, target, cfg, tmp_path / "run")
        for k, v in bundle.u1.state_dict().items():
            assert torch.equal(u1_before[k], v), k
        stem_changed = False
        for k, v in bundle.u2.state_dict().items():
            if k.startswith("enc_blocks.0."):
                stem_changed = stem_changed or not torch.equal(u2_before[k], v)
            else:
                assert torch.equal(u2_before[k], v), k
        assert stem_changed

    def test_step_callback_sees_clipped_critics_and_exact_totals(
            self, corpus, tmp_path):
        source, target = corpus
        weights = LossWeights(stage_switch_epoch=1)
        bundle, _, cfg = fresh_setup(weights=weights, epochs=2)
        checked = []

        def callback(bundle_, breakdown, record):
            assert critic_params_within(bundle_, cfg.clip_bound)
            total = 0.0
            for term in TERM_ORDER:
                if term in record["terms"]:
                    total += cfg.weights.value_for(term, record["epoch"]) \
                        * record["terms"][term]
            assert record["total"] == total
            checked.append(record["epoch"])

        train_uda(bundle, source, target, cfg, tmp_path / "run",
                  step_callback=callback)
        assert len(checked) == 4  # 2 epochs x 2 steps

    def test_stage_switch_logged_once_with_weight_bump(self, corpus, tmp_path):
        source, target = corpus
        weights = LossWeights(stage_switch_epoch=3)
        bundle, _, cfg = fresh_setup(weights=weights, epochs=5)
        result = train_uda(bundle, source, target, cfg, tmp_path / "run")
        records = read_log(result.log_path)
        stages = [(r["epoch"], r["stage"]) for r in records
                  if r["kind"] == "stage"]
        assert stages == [(0, "teacher_student"), (3, "partners")]
        for r in records:
            if r["kind"] != "step":
                continue
            if r["epoch"] < 3:
                assert r["seg_u3_weight"] == 1.0
                assert r["u3_pseudo_source"] == "u2"
            else:
                assert r["seg_u3_weight"] == 5.0
                assert r["u3_pseudo_source"] == "u4"

    def test_run_is_bitwise_repeatable(self, corpus, tmp_path):
        source, target = corpus
        outs = []
        for tag in ("a", "b"):
            bundle, _, cfg = fresh_setup(epochs=2, seed=5)
            result = train_uda(bundle, source, target, cfg, tmp_path / tag,
                               val_subjects=target)
            outs.append(result)
        with open(outs[0].checkpoint_path, "rb") as f1, \
                open(outs[1].checkpoint_path, "rb") as f2:
            assert f1.read() == f2.read()
        with open(outs[0].log_path, "rb") as f1, \
                open(outs[1].log_path, "rb") as f2:
            assert f1.read() == f2.read()

    def test_resume_reproduces_uninterrupted_run(self, corpus, tmp_path):
        source, target = corpus

        bundle_a, _, cfg = fresh_setup(epochs=4, seed=7, checkpoint_every=2)
        full = train_uda(bundle_a, source, target, cfg, tmp_path / "full",
                         val_subjects=target)
        mid_ckpt = tmp_path / "full" / "epoch_0002.ckpt"
        assert mid_ckpt.exists()

        bundle_b, _, _ = fresh_setup(epochs=4, seed=7, checkpoint_every=2)
        resumed = train_uda(bundle_b, source, target, cfg,
                            tmp_path / "resumed", val_subjects=target,
                            resume_from=str(mid_ckpt))

        with open(full.checkpoint_path, "rb") as f1, \
                open(resumed.checkpoint_path, "rb") as f2:
            assert f1.read() == f2.read()

        def tail(path):
            return [r for r in read_log(path)
                    if r["kind"] in ("step", "epoch", "val")
                    and r["epoch"] >= 2]

        assert tail(resumed.log_path) == tail(full.log_path)

    def test_too_few_target_slices_rejected(self, corpus, tmp_path):
        source, target = corpus
        bundle, _, cfg = fresh_setup(batch_size=64)
        with pytest.raises(ValidationError):
            train_uda(bundle, source, target, cfg, tmp_path / "run")


class TestCheckpointCompatibility:
    def make_uda_ckpt(self, tmp_path, variant_name="Proposed", seed=0):
        variant = variant_config(variant_name)
        bundle = build_bundle(BUNDLE_CFG, variant, seed)
        cfg = tiny_cfg(variant=variant, seed=seed)
        optimizers = build_optimizers(bundle, cfg)
        rng = np.random.Generator(np.random.PCG64(seed))
        path = tmp_path / "state.ckpt"
        save_uda_checkpoint(path, bundle, optimizers, cfg, 1, rng)
        return path, bundle

    def test_wrong_kind_rejected_everywhere(self, corpus, tmp_path):
        source, _ = corpus
        model = build_segnet(BUNDLE_CFG.segnet_config("u1"), 0)
        pre_cfg = PretrainConfig(epochs=1, batch_size=4, seed=0)
        pre = pretrain_source(model, source, pre_cfg, tmp_path / "pre")
        bundle = build_bundle(BUNDLE_CFG, variant_config("Proposed"), 0)
        with pytest.raises(CheckpointMismatchError):
            load_uda_checkpoint(pre.checkpoint_path, bundle)
        uda_path, _ = self.make_uda_ckpt(tmp_path)
        with pytest.raises(CheckpointMismatchError):
            load_pretrain_checkpoint(uda_path, model)

    def test_network_set_mismatch_rejected(self, tmp_path):
        path, _ = self.make_uda_ckpt(tmp_path, "PSIM")
        full = build_bundle(BUNDLE_CFG, variant_config("Proposed"), 0)
        with pytest.raises(CheckpointMismatchError):
            load_uda_checkpoint(path, full)

    def test_round_trip_restores_models(self, tmp_path):
        path, bundle = self.make_uda_ckpt(tmp_path, seed=4)
        clone = build_bundle(BUNDLE_CFG, variant_config("Proposed"), 11)
        meta, _ = load_uda_checkpoint(path, clone)
        assert meta["epoch"] == 1
        for name, model in bundle.models().items():
            other = clone.models()[name]
            for k, v in model.state_dict().items():
                assert torch.equal(other.state_dict()[k], v), (name, k)

    def test_extract_network_paths(self, corpus, tmp_path):
        source, _ = corpus
        model = build_segnet(BUNDLE_CFG.segnet_config("u1"), 0)
        pre_cfg = PretrainConfig(epochs=1, batch_size=4, seed=0)
        pre = pretrain_source(model, source, pre_cfg, tmp_path / "pre")

        extracted, meta = extract_network(pre.checkpoint_path, "u1")
        assert meta["kind"] == "pretrain_checkpoint"
        assert not extracted.training
        for k, v in model.state_dict().items():
            assert torch.equal(extracted.state_dict()[k], v), k
        with pytest.raises(CheckpointMismatchError):
            extract_network(pre.checkpoint_path, "u3")

        uda_path, bundle = self.make_uda_ckpt(tmp_path)
        u3, meta = extract_network(uda_path, "u3")
        for k, v in bundle.u3.state_dict().items():
            assert torch.equal(u3.state_dict()[k], v), k
        with pytest.raises(CheckpointMismatchError):
            extract_network(uda_path, "d1")

        other = tmp_path / "other.uds"
        container.write_container(other, {"kind": "dataset"}, {})
        with pytest.raises(CheckpointMismatchError):
            extract_network(other, "u1")


class _Thresholder(nn.Module):
    """Logits proportional to the input; thresholds exactly at 0.5."""

    def forward(self, x):
        return SimpleNamespace(logits=x * 20.0 - 10.0)


class TestEvaluationHelpers:
    def label_subject(self):
        rng = np.random.default_rng(0)
        labels = (rng.random((3, 64, 64)) > 0.7).astype(np.uint8)
        return Subject("s0", "MR", labels.astype(np.float32), labels=labels)

    def test_identity_model_scores_perfectly(self):
        sub = self.label_subject()
        model = _Thresholder()
        assert validation_dice(model, [sub]) == 1.0
        pred = predict_volume(model, sub)
        np.testing.assert_array_equal(pred, sub.labels.astype(bool))

    def test_evaluate_subjects_records(self):
        sub = self.label_subject()
        records = evaluate_subjects(_Thresholder(), [sub])
        assert records[0].subject_id == "s0"
        assert records[0].values["DS"] == 1.0

    def test_unlabeled_subject_rejected(self):
        sub = Subject("u", "MR", np.zeros((1, 64, 64), dtype=np.float32))
        with pytest.raises(ValidationError):
            validation_dice(_Thresholder(), [sub])
        with pytest.raises(ValidationError):
            evaluate_subjects(_Thresholder(), [sub])
