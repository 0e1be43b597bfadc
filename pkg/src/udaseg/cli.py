"""Command-line entry points: synth, pretrain, train, eval, ablate, plot.

All commands are non-interactive; the exit code is the only success signal.
Every run directory receives the fully resolved configuration before any
work starts, so a run can be reproduced from its own artifacts. Run ids are
deterministic (command, variant, seed), never timestamps.
"""

import argparse
import json
import os
import re
import sys

from . import ablation as ablation_mod
from . import reporting
from .config import load_config, write_resolved
from .data import generate_synthetic, load_dataset, make_cv_splits, save_dataset
from .errors import ConfigError, ValidationError
from .networks import build_segnet
from .signals import low_signal_augment
from .training import (
    evaluate_subjects,
    extract_network,
    load_pretrain_checkpoint,
    pretrain_source,
    train_uda,
    build_bundle,
)

OUT_ROOT_ENV = "UDASEG_OUT_ROOT"


def _slug(text):
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "run"


def _out_dir(args, default_id):
    root = args.out or os.environ.get(OUT_ROOT_ENV) or "runs"
    run_id = args.run_id or default_id
    path = os.path.join(root, run_id)
    os.makedirs(path, exist_ok=True)
    return path


def _gather_overrides(args):
    """Convenience flags become dotted overrides; explicit --set wins."""
    overrides = []
    if getattr(args, "epochs", None) is not None:
        section = "pretrain" if args.command == "pretrain" else "train"
        overrides.append(f"{section}.epochs={args.epochs}")
    if getattr(args, "seed", None) is not None:
        overrides.append("data.seed={}".format(args.seed))
        overrides.append("pretrain.seed={}".format(args.seed))
        overrides.append("train.seed={}".format(args.seed))
    if getattr(args, "stage_switch", None) is not None:
        overrides.append(f"weights.stage_switch_epoch={args.stage_switch}")
    if getattr(args, "variant", None) is not None:
        overrides.append(f"train.variant={args.variant}")
    overrides.extend(args.set or [])
    return overrides


def _load_run_config(args):
    return load_config(args.config, _gather_overrides(args))


def _target_split(target_subjects, folds, fold, seed):
    """(training targets, labeled test fold). folds=0 keeps everything in both."""
    if folds == 0:
        return list(target_subjects), list(target_subjects)
    ids = [s.subject_id for s in target_subjects]
    splits = make_cv_splits(ids, k=folds, seed=seed)
    if not 0 <= fold < folds:
        raise ConfigError(f"--fold must be in [0, {folds}), got {fold}")
    test_ids = set(splits[fold])
    train = [s for s in target_subjects if s.subject_id not in test_ids]
    test = [s for s in target_subjects if s.subject_id in test_ids]
    return train, test


def _require(args, flag, value):
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _load_data(args, run_cfg):
    if args.data:
        source, target, _ = load_dataset(args.data)
        return source, target
    if getattr(args, "synth", False):
        return generate_synthetic(run_cfg.data)
    raise ConfigError("--data is required (or pass --synth to generate)")


def cmd_synth(args):
    run_cfg = _load_run_config(args)
    out_dir = _out_dir(args, f"synth_seed{run_cfg.data.seed}")
    write_resolved(run_cfg, os.path.join(out_dir, "config.ini"))
    source, target = generate_synthetic(run_cfg.data)
    path = os.path.join(out_dir, "dataset.uds")
    save_dataset(path, source, target, run_cfg.data)
    print(path)
    return 0


def cmd_pretrain(args):
    run_cfg = _load_run_config(args)
    out_dir = _out_dir(args, f"pretrain_seed{run_cfg.pretrain.seed}")
    write_resolved(run_cfg, os.path.join(out_dir, "config.ini"))
    source, _ = _load_data(args, run_cfg)
    train_subjects, val_subjects = _target_split(
        source, args.folds, args.fold, run_cfg.data.seed)
    model = build_segnet(run_cfg.models.segnet_config("u1"),
                         run_cfg.pretrain.seed)
    result = pretrain_source(model, train_subjects, run_cfg.pretrain,
                             out_dir, val_subjects=val_subjects)
    reporting.plot_validation_curves(
        result.history, os.path.join(out_dir, "validation_curves.png"),
        title="Source pretraining validation Dice")
    print(result.checkpoint_path)
    return 0


def cmd_train(args):
    run_cfg = _load_run_config(args)
    u1_ckpt = _require(args, "--u1-ckpt", args.u1_ckpt)
    out_dir = _out_dir(args, "train_{}_seed{}_fold{}".format(
        _slug(run_cfg.variant_name), run_cfg.train.seed, args.fold))
    write_resolved(run_cfg, os.path.join(out_dir, "config.ini"))
    source, target = _load_data(args, run_cfg)
    target_train, target_test = _target_split(
        target, args.folds, args.fold, run_cfg.data.seed)
    bundle = build_bundle(run_cfg.models, run_cfg.train.variant,
                          run_cfg.train.seed)
    load_pretrain_checkpoint(u1_ckpt, bundle.u1)
    result = train_uda(bundle, source, target_train, run_cfg.train, out_dir,
                       val_subjects=target_test, resume_from=args.resume)
    if any(result.history.values()):
        reporting.plot_validation_curves(
            result.history, os.path.join(out_dir, "validation_curves.png"),
            title=f"{run_cfg.variant_name}: per-epoch validation Dice")
    print(result.checkpoint_path)
    return 0


def _eval_transform(args, which, meta):
    if args.transform == "lsaf":
        return lambda x: low_signal_augment(x, args.beta)
    if args.transform == "none":
        return None
    # auto: the checkpoint knows whether its U3 saw augmented inputs
    variant = (meta.get("train_config") or {}).get("variant") or {}
    if which == "u3" and variant.get("use_lsaf", True):
        beta = (meta.get("train_config") or {}).get("lsaf_beta", args.beta)
        return lambda x: low_signal_augment(x, beta)
    return None


def cmd_eval(args):
    run_cfg = _load_run_config(args)
    out_dir = _out_dir(args, "eval_{}_{}".format(
        args.network, _slug(os.path.basename(args.ckpt))))
    write_resolved(run_cfg, os.path.join(out_dir, "config.ini"))
    _, target = _load_data(args, run_cfg)
    if args.all_targets or args.folds == 0:
        subjects = target
    else:
        _, subjects = _target_split(target, args.folds, args.fold,
                                    run_cfg.data.seed)
    if args.hard_only:
        subjects = [s for s in subjects if "hard" in s.tags]
        if not subjects:
            raise ValidationError("no hard-tagged subjects to evaluate")
    for sub in subjects:
        if sub.labels is None:
            raise ValidationError(
                f"subject {sub.subject_id} has no labels; cannot evaluate")
    model, meta = extract_network(args.ckpt, args.network)
    transform = _eval_transform(args, args.network, meta)
    train_cfg = meta.get("train_config") or {}
    pamr_kwargs = {
        "iterations": train_cfg.get("pamr_iterations", 10),
        "dilations": tuple(train_cfg.get("pamr_dilations", (1, 2, 4, 8))),
        "squared": train_cfg.get("pamr_squared", True),
    }
    records = {args.network: evaluate_subjects(
        model, subjects, transform=transform)}
    if args.post_process == "pamr":
        records[args.network + "+pp"] = evaluate_subjects(
            model, subjects, transform=transform, post_process="pamr",
            pamr_kwargs=pamr_kwargs)
    paths = [
        reporting.write_metrics_table(
            records, os.path.join(out_dir, "metrics.tsv")),
        reporting.write_aggregate_table(
            records, os.path.join(out_dir, "aggregate.tsv")),
        reporting.plot_subject_bars(
            records, os.path.join(out_dir, "subject_bars.png")),
    ]
    for p in paths:
        print(p)
    return 0


def cmd_ablate(args):
    run_cfg = _load_run_config(args)
    u1_ckpt = _require(args, "--u1-ckpt", args.u1_ckpt)
    names = ([n.strip() for n in args.settings.split(",") if n.strip()]
             if args.settings else sorted(ablation_mod.VARIANTS))
    out_dir = _out_dir(args, f"ablate_seed{run_cfg.train.seed}_fold{args.fold}")
    write_resolved(run_cfg, os.path.join(out_dir, "config.ini"))
    source, target = _load_data(args, run_cfg)
    target_train, target_test = _target_split(
        target, args.folds, args.fold, run_cfg.data.seed)
    all_records = {}
    for name in names:
        sub_dir = os.path.join(out_dir, _slug(name))
        records, _ = ablation_mod.run_ablation(
            name, run_cfg.models, run_cfg.train, u1_ckpt, source,
            target_train, target_test, sub_dir)
        all_records[name] = records
    paths = reporting.emit_reports({}, all_records, out_dir)
    for p in paths:
        print(p)
    return 0


def cmd_plot(args):
    os.makedirs(args.out or ".", exist_ok=True)
    out_dir = args.out or "."
    history = {}
    n_steps = 0
    with open(args.log) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind") == "val":
                history.setdefault(rec["network"], []).append(rec["dice"])
            elif rec.get("kind") == "step":
                n_steps += 1
    made = []
    if n_steps:
        made.append(reporting.plot_loss_curves(
            args.log, os.path.join(out_dir, "loss_curves.png")))
    if history:
        made.append(reporting.plot_validation_curves(
            history, os.path.join(out_dir, "validation_curves.png")))
    if not made:
        raise ValidationError(f"no plottable records in {args.log}")
    for p in made:
        print(p)
    return 0


def _add_common(p, seed_help="seed for data, pretraining, and adaptation"):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--out", help=f"output root (default ${OUT_ROOT_ENV} or ./runs)")
    p.add_argument("--run-id", help="run directory name (default is derived, "
                   "deterministic)")
    p.add_argument("--seed", type=int, help=seed_help)


def _add_fold(p):
    p.add_argument("--folds", type=int, default=4,
                   help="cross-validation fold count (0 disables the split)")
    p.add_argument("--fold", type=int, default=0,
                   help="held-out fold index")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="udaseg",
        description="Cross-modality liver segmentation by unsupervised "
                    "domain adaptation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic two-domain dataset")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="supervised source training of U1")
    _add_common(p)
    _add_fold(p)
    p.add_argument("--data", help="dataset archive from `udaseg synth`")
    p.add_argument("--synth", action="store_true",
                   help="generate the dataset in-process instead of --data")
    p.add_argument("--epochs", type=int, help="pretraining epochs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="adversarial + self-learning adaptation")
    _add_common(p)
    _add_fold(p)
    p.add_argument("--data", help="dataset archive from `udaseg synth`")
    p.add_argument("--synth", action="store_true",
                   help="generate the dataset in-process instead of --data")
    p.add_argument("--u1-ckpt", help="pretrained source checkpoint")
    p.add_argument("--variant", help="ablation setting name "
                   "(default Proposed; see `udaseg ablate --list`)")
    p.add_argument("--epochs", type=int, help="adaptation epochs")
    p.add_argument("--T", dest="stage_switch", type=int,
                   help="epoch at which self-learning switches stages")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpointed network")
    _add_common(p)
    _add_fold(p)
    p.add_argument("--data", help="dataset archive from `udaseg synth`")
    p.add_argument("--synth", action="store_true",
                   help="generate the dataset in-process instead of --data")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--network", default="u3",
                   choices=("u1", "u2", "u3", "u4"),
                   help="which segmentation network to evaluate")
    p.add_argument("--transform", default="auto",
                   choices=("auto", "lsaf", "none"),
                   help="input transform (auto follows the checkpoint)")
    p.add_argument("--beta", type=float, default=3.0,
                   help="transform strength when --transform lsaf")
    p.add_argument("--post-process", choices=("pamr",),
                   help="additionally report refined-mask metrics")
    p.add_argument("--all-targets", action="store_true",
                   help="evaluate every target subject, not one fold")
    p.add_argument("--hard-only", action="store_true",
                   help="restrict to subjects tagged hard")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation settings")
    _add_common(p)
    _add_fold(p)
    p.add_argument("--data", help="dataset archive from `udaseg synth`")
    p.add_argument("--synth", action="store_true",
                   help="generate the dataset in-process instead of --data")
    p.add_argument("--u1-ckpt", help="pretrained source checkpoint")
    p.add_argument("--settings", help="comma-separated setting names "
                   "(default: all)")
    p.add_argument("--epochs", type=int, help="adaptation epochs per setting")
    p.add_argument("--list", action="store_true",
                   help="print the available setting names and exit")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render figures from a training log")
    p.add_argument("--log", required=True, help="newline-delimited log file")
    p.add_argument("--out", help="output directory (default .)")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "ablate" and getattr(args, "list", False):
        for name in sorted(ablation_mod.VARIANTS):
            print(name)
        return 0
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
