"""Report emission: delimited metric tables and matplotlib figures.

Tables are tab-separated with fixed 6-decimal formatting and sorted rows,
so regenerating from the same inputs gives identical bytes. Figures (PNG)
accompany the tables: per-epoch validation Dice curves per network, and
per-subject grouped metric bars per setting.
"""

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import ValidationError  # noqa: E402
from .metrics import METRIC_NAMES, aggregate  # noqa: E402


def _fmt(x):
    return f"{x:.6f}"


def write_metrics_table(records_by_setting, path):
    """Per-subject rows for every setting; returns the path."""
    lines = ["setting\tsubject\t" + "\t".join(METRIC_NAMES)]
    for setting in sorted(records_by_setting):
        for rec in sorted(records_by_setting[setting], key=lambda r: r.subject_id):
            vals = "\t".join(_fmt(rec.values[m]) for m in METRIC_NAMES)
            lines.append(f"{setting}\t{rec.subject_id}\t{vals}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def write_aggregate_table(records_by_setting, path):
    """Mean and std per metric for every setting; returns the path."""
    header = ["setting"]
    for m in METRIC_NAMES:
        header += [f"{m}_mean", f"{m}_std"]
    lines = ["\t".join(header)]
    for setting in sorted(records_by_setting):
        agg = aggregate(records_by_setting[setting])
        row = [setting]
        for m in METRIC_NAMES:
            row += [_fmt(agg[m]["mean"]), _fmt(agg[m]["std"])]
        lines.append("\t".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def plot_validation_curves(history, path, title="Validation Dice"):
    """history: network name -> list of per-epoch Dice values."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name in sorted(history):
        values = history[name]
        if values:
            ax.plot(range(len(values)), values, marker="o", markersize=3,
                    label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("Dice")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_subject_bars(records_by_setting, path, metric="DS"):
    """Grouped per-subject bars of one metric, one group per setting."""
    settings = sorted(records_by_setting)
    if not settings:
        raise ValidationError("no settings to plot")
    subjects = sorted({
        r.subject_id for recs in records_by_setting.values() for r in recs
    })
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(subjects)), 4.5))
    width = 0.8 / max(len(settings), 1)
    for i, setting in enumerate(settings):
        by_subject = {r.subject_id: r.values[metric]
                      for r in records_by_setting[setting]}
        xs = [j + i * width for j in range(len(subjects))]
        ys = [by_subject.get(s, 0.0) for s in subjects]
        ax.bar(xs, ys, width=width, label=setting)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(subjects))])
    ax.set_xticklabels(subjects, rotation=30, ha="right")
    ax.set_ylabel(metric)
    ax.set_ylim(0.0, 1.0)
    ax.set_title(f"Per-subject {metric}")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curves(log_path, path):
    """Per-term loss curves from a newline-delimited training log."""
    steps = []
    with open(log_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind") == "step" and "terms" in rec:
                steps.append(rec)
    if not steps:
        raise ValidationError(f"no step records in {log_path}")
    terms = sorted({t for rec in steps for t in rec["terms"]})
    fig, ax = plt.subplots(figsize=(8, 5))
    xs = range(len(steps))
    for term in terms:
        ax.plot(xs, [rec["terms"].get(term) for rec in steps],
                label=term, linewidth=0.9)
    ax.plot(xs, [rec["total"] for rec in steps], label="total",
            color="black", linewidth=1.6)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Training loss terms")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def emit_reports(history, records_by_setting, out_dir):
    """Write the delimited tables and figures; returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if records_by_setting:
        paths.append(write_metrics_table(
            records_by_setting, os.path.join(out_dir, "metrics.tsv")))
        paths.append(write_aggregate_table(
            records_by_setting, os.path.join(out_dir, "aggregate.tsv")))
        paths.append(plot_subject_bars(
            records_by_setting, os.path.join(out_dir, "subject_bars.png")))
    if history and any(history.values()):
        paths.append(plot_validation_curves(
            history, os.path.join(out_dir, "validation_curves.png")))
    if not paths:
        raise ValidationError("nothing to report: no history and no records")
    return paths
