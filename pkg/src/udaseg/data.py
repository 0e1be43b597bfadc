"""Volume loading, preprocessing, CV splits, and the synthetic benchmark data.

The synthetic generator renders paired-style two-domain abdominal phantoms:
each subject is a stack of slices containing a body ellipse over a dark
exterior, one large smooth "liver" blob (the labeled structure), a few
smaller distractor blobs, smooth background texture, and pixel noise. The
two domains share geometry statistics but differ in their intensity
assignments; a configurable fraction of target subjects is rendered "hard",
with the liver barely above the surrounding tissue level.
"""

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import container, nifti
from .errors import ConfigError, ValidationError

CT_CLAMP = (-1000.0, 400.0)
DEFAULT_SIZE = 256


@dataclass
class Subject:
    subject_id: str
    modality: str  # "CT" or "MR"
    images: np.ndarray  # (n_slices, H, W) float32 in [0, 1]
    labels: np.ndarray = None  # (n_slices, H, W) uint8 or None
    spacing: tuple = (1.0, 1.0, 1.0)
    tags: tuple = ()
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3:
            raise ValidationError(
                f"subject {self.subject_id}: images must be (n, H, W)"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.images.shape:
                raise ValidationError(
                    f"subject {self.subject_id}: label shape "
                    f"{self.labels.shape} != image shape {self.images.shape}"
                )


@dataclass
class SynthConfig:
    image_size: int = 64
    n_source: int = 8
    n_target: int = 8
    slices_per_subject: int = 6
    hard_fraction: float = 0.0
    noise: float = 0.025
    texture: float = 0.03
    seed: int = 0
    # Domain intensity levels (exterior, body tissue, liver, distractor).
    source_levels: tuple = (0.005, 0.45, 0.75, 0.60)
    target_levels: tuple = (0.005, 0.10, 0.55, 0.80)
    hard_liver_level: float = 0.13
    # Smooth multiplicative shading on target subjects only, like an MR coil
    # bias field. Source stays clean, so the two domains differ by more than
    # a palette swap.
    target_bias: float = 0.25
    # Bright blobs rendered in source subjects only, like contrast-enhanced
    # vessels or clips that one scanner protocol shows and the other does
    # not. They are never labeled, so they shift the source feature
    # statistics without touching the mask statistics. Level 0 disables;
    # the radius bounds are fractions of the image size.
    source_marker_level: float = 0.9
    source_marker_count: int = 2
    source_marker_radius: tuple = (0.04, 0.07)

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigError("image_size must be a multiple of 16 and >= 16")
        if not (0.0 <= self.hard_fraction <= 1.0):
            raise ConfigError("hard_fraction must lie in [0, 1]")
        if self.n_source < 1 or self.n_target < 1 or self.slices_per_subject < 1:
            raise ConfigError("subject and slice counts must be >= 1")
        if not (0.0 <= self.target_bias < 1.0):
            raise ConfigError("target_bias must lie in [0, 1)")
        if not (0.0 <= self.source_marker_level <= 1.0):
            raise ConfigError("source_marker_level must lie in [0, 1]")
        if self.source_marker_count < 0:
            raise ConfigError("source_marker_count must be >= 0")
        lo, hi = self.source_marker_radius
        if not (0.0 < lo <= hi < 0.5):
            raise ConfigError(
                "source_marker_radius bounds must satisfy 0 < lo <= hi < 0.5"
            )


def load_volume(path):
    """Read a NIfTI volume; returns (array (slice, H, W), spacing)."""
    return nifti.read_nifti(path)


def _resize(volume, size, mode):
    t = torch.from_numpy(np.ascontiguousarray(volume, dtype=np.float32))[:, None]
    if mode == "bilinear":
        out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(t, size=(size, size), mode="nearest")
    return out[:, 0].numpy()


def _check_labels(labels, volume):
    labels = np.asarray(labels)
    if labels.shape != np.asarray(volume).shape:
        raise ValidationError(
            f"label shape {labels.shape} != volume shape {np.asarray(volume).shape}"
        )
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be binary (0/1)")
    return labels


def preprocess_ct(volume, labels, spacing=(1.0, 1.0, 1.0), subject_id="",
                  size=DEFAULT_SIZE):
    """Clamp to [-1000, 400] HU, resize, map to [0, 1], keep liver slices only."""
    volume = np.asarray(volume, dtype=np.float32)
    labels = _check_labels(labels, volume)
    keep = labels.reshape(labels.shape[0], -1).sum(axis=1) > 0
    if not keep.any():
        raise ValidationError(f"subject {subject_id}: no liver slices in volume")
    volume = volume[keep]
    labels = labels[keep]
    clamped = np.clip(volume, CT_CLAMP[0], CT_CLAMP[1])
    img = _resize(clamped, size, "bilinear")
    lab = _resize(labels.astype(np.float32), size, "nearest")
    img = (img + 1000.0) / 1400.0
    scale = volume.shape[1] / size
    sp = (spacing[0], spacing[1] * scale, spacing[2] * volume.shape[2] / size)
    return Subject(
        subject_id=subject_id,
        modality="CT",
        images=np.clip(img, 0.0, 1.0),
        labels=(lab > 0.5).astype(np.uint8),
        spacing=sp,
        provenance="ct",
    )


def preprocess_mr(volume, labels=None, spacing=(1.0, 1.0, 1.0), subject_id="",
                  size=DEFAULT_SIZE):
    """Min-max normalize over the volume and resize; labels optional."""
    volume = np.asarray(volume, dtype=np.float32)
    lo, hi = float(volume.min()), float(volume.max())
    if hi == lo:
        raise ValidationError(
            f"subject {subject_id}: constant MR volume cannot be normalized"
        )
    norm = (volume - lo) / (hi - lo)
    img = _resize(norm, size, "bilinear")
    lab = None
    if labels is not None:
        labels = _check_labels(labels, volume)
        lab = (_resize(labels.astype(np.float32), size, "nearest") > 0.5).astype(
            np.uint8
        )
    scale = volume.shape[1] / size
    sp = (spacing[0], spacing[1] * scale, spacing[2] * volume.shape[2] / size)
    return Subject(
        subject_id=subject_id,
        modality="MR",
        images=np.clip(img, 0.0, 1.0),
        labels=lab,
        spacing=sp,
        provenance="mr",
    )


def make_cv_splits(subject_ids, k=5, seed=0):
    """Seeded permutation chunked into k equal folds of subject ids."""
    ids = list(subject_ids)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if len(ids) == 0 or len(ids) % k:
        raise ConfigError(
            f"{len(ids)} subjects cannot be split into {k} equal folds"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(ids))
    fold_size = len(ids) // k
    return [
        [ids[j] for j in order[i * fold_size : (i + 1) * fold_size]]
        for i in range(k)
    ]


def _blob_mask(size, cy, cx, radius, wobble):
    """Smooth star-convex blob: r(theta) = radius * (1 + sum_k a_k cos(k theta + phi_k))."""
    ys, xs = np.mgrid[0:size, 0:size]
    dy = ys - cy
    dx = xs - cx
    theta = np.arctan2(dy, dx)
    r = np.full((size, size), radius)
    for k, (amp, phase) in enumerate(wobble, start=1):
        r = r + radius * amp * np.cos(k * theta + phase)
    return dy * dy + dx * dx < r * r


def _texture(rng, size, amplitude):
    field_ = rng.standard_normal((size, size))
    smooth = ndimage.gaussian_filter(field_, sigma=size / 8.0)
    peak = np.abs(smooth).max()
    if peak == 0:
        return np.zeros((size, size))
    return smooth / peak * amplitude


def _render_subject(rng, cfg, levels, hard, subject_id, modality, bias=0.0,
                    shade_seed=0, marker_level=0.0, marker_count=0,
                    marker_seed=0):
    size = cfg.image_size
    exterior, tissue, liver_level, distractor_level = levels
    if hard:
        liver_level = cfg.hard_liver_level

    body_ry = size * rng.uniform(0.40, 0.46)
    body_rx = size * rng.uniform(0.42, 0.48)
    cy0 = size / 2 + rng.uniform(-2, 2)
    cx0 = size / 2 + rng.uniform(-2, 2)

    liver_r = size * rng.uniform(0.17, 0.24)
    ang = rng.uniform(0, 2 * np.pi)
    off = size * rng.uniform(0.05, 0.13)
    liver_cy = cy0 + off * np.sin(ang)
    liver_cx = cx0 + off * np.cos(ang)
    wobble = [(rng.uniform(0.04, 0.12) / k, rng.uniform(0, 2 * np.pi))
              for k in (1, 2, 3)]

    n_distract = rng.integers(1, 4)
    distractors = []
    for _ in range(n_distract):
        for _attempt in range(50):
            dr = size * rng.uniform(0.06, 0.10)
            da = rng.uniform(0, 2 * np.pi)
            dd = rng.uniform(0.55, 0.85)
            dcy = cy0 + dd * body_ry * np.sin(da) * 0.8
            dcx = cx0 + dd * body_rx * np.cos(da) * 0.8
            gap = np.hypot(dcy - liver_cy, dcx - liver_cx)
            if gap > liver_r * 1.25 + dr + 2:
                dwob = [(rng.uniform(0.03, 0.10) / k, rng.uniform(0, 2 * np.pi))
                        for k in (1, 2)]
                distractors.append((dcy, dcx, dr, dwob))
                break

    markers = []
    if marker_level > 0 and marker_count > 0:
        # Markers come from their own generator, like the shading field, so
        # switching them on or off leaves the geometry stream untouched.
        # They land on the far side of the body from the liver, which lets
        # even organ-sized markers clear it.
        mark_rng = np.random.Generator(np.random.PCG64(marker_seed))
        lo, hi = cfg.source_marker_radius
        for _ in range(marker_count):
            for attempt in range(50):
                # Shrink on retries so a crowded body still gets its marker.
                mr = size * mark_rng.uniform(lo, hi) * 0.97 ** attempt
                ma = ang + np.pi + mark_rng.uniform(-0.9, 0.9)
                md = mark_rng.uniform(0.35, 0.80)
                mcy = cy0 + md * body_ry * np.sin(ma) * 0.8
                mcx = cx0 + md * body_rx * np.cos(ma) * 0.8
                gap = np.hypot(mcy - liver_cy, mcx - liver_cx)
                if gap > liver_r + mr + 2:
                    mwob = [(mark_rng.uniform(0.03, 0.10) / k,
                             mark_rng.uniform(0, 2 * np.pi)) for k in (1, 2)]
                    markers.append((mcy, mcx, mr, mwob))
                    break

    tex = _texture(rng, size, cfg.texture)
    shading = None
    if bias > 0:
        # One smooth per-subject gain field, constant across slices. Drawn
        # from its own generator so toggling the bias amplitude changes the
        # shading only, never the geometry stream.
        shade_rng = np.random.Generator(np.random.PCG64(shade_seed))
        field_ = ndimage.gaussian_filter(
            shade_rng.standard_normal((size, size)), sigma=size / 4.0
        )
        shading = 1.0 + bias * field_ / np.abs(field_).max()
    images = np.zeros((cfg.slices_per_subject, size, size), dtype=np.float32)
    labels = np.zeros((cfg.slices_per_subject, size, size), dtype=np.uint8)
    n = cfg.slices_per_subject
    for s in range(n):
        # Organ cross-sections swell toward the middle slice and drift a bit.
        profile = 0.75 + 0.25 * np.sin(np.pi * (s + 0.5) / n)
        drift_y = rng.uniform(-1.0, 1.0)
        drift_x = rng.uniform(-1.0, 1.0)
        ys, xs = np.mgrid[0:size, 0:size]
        body = (
            ((ys - cy0) / body_ry) ** 2 + ((xs - cx0) / body_rx) ** 2
        ) < 1.0
        liver = _blob_mask(
            size, liver_cy + drift_y, liver_cx + drift_x, liver_r * profile, wobble
        )
        liver &= body
        canvas = np.full((size, size), exterior, dtype=np.float64)
        canvas[body] = tissue
        for dcy, dcx, dr, dwob in distractors:
            dmask = _blob_mask(size, dcy + drift_y, dcx + drift_x, dr * profile, dwob)
            canvas[dmask & body] = distractor_level
        for mcy, mcx, mr, mwob in markers:
            mmask = _blob_mask(size, mcy + drift_y, mcx + drift_x, mr * profile, mwob)
            canvas[mmask & body] = marker_level
        canvas[liver] = liver_level
        canvas = ndimage.gaussian_filter(canvas, sigma=0.8)
        if shading is not None:
            canvas = canvas * shading
        canvas = canvas + tex * np.where(body, 1.0, 0.25)
        canvas = canvas + rng.standard_normal((size, size)) * cfg.noise
        images[s] = np.clip(canvas, 0.001, 1.0).astype(np.float32)
        labels[s] = liver.astype(np.uint8)

    tags = ("hard",) if hard else ()
    return Subject(
        subject_id=subject_id,
        modality=modality,
        images=images,
        labels=labels,
        spacing=(1.0, 1.0, 1.0),
        tags=tags,
        provenance=f"synthetic seed={cfg.seed}",
    )


def generate_synthetic(cfg: SynthConfig):
    """Deterministic two-domain synthetic dataset: (source, target) subjects.

    Exactly round(hard_fraction * n_target) target subjects are rendered hard
    (liver at cfg.hard_liver_level, barely above the tissue level); their
    Subject.tags contain "hard". Identical config and seed give bitwise
    identical arrays.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    source = [
        _render_subject(
            rng, cfg, cfg.source_levels, False, f"src{i:02d}", "CT",
            marker_level=cfg.source_marker_level,
            marker_count=cfg.source_marker_count,
            marker_seed=cfg.seed * 99991 + i,
        )
        for i in range(cfg.n_source)
    ]
    n_hard = int(round(cfg.hard_fraction * cfg.n_target))
    hard_idx = set(rng.choice(cfg.n_target, size=n_hard, replace=False).tolist())
    target = [
        _render_subject(
            rng, cfg, cfg.target_levels, i in hard_idx, f"tgt{i:02d}", "MR",
            bias=cfg.target_bias, shade_seed=cfg.seed * 100003 + i,
        )
        for i in range(cfg.n_target)
    ]
    return source, target


def save_dataset(path, source, target, cfg=None):
    """Write subjects into a single deterministic archive file."""
    arrays = {}
    meta_subjects = []
    for group, subjects in (("source", source), ("target", target)):
        for sub in subjects:
            key = f"{group}/{sub.subject_id}"
            arrays[key + "/images"] = sub.images
            entry = {
                "group": group,
                "subject_id": sub.subject_id,
                "modality": sub.modality,
                "spacing": list(sub.spacing),
                "tags": list(sub.tags),
                "provenance": sub.provenance,
                "has_labels": sub.labels is not None,
            }
            if sub.labels is not None:
                arrays[key + "/labels"] = sub.labels
            meta_subjects.append(entry)
    meta = {
        "kind": "dataset",
        "subjects": meta_subjects,
        "config": asdict(cfg) if cfg is not None else None,
    }
    return container.write_container(path, meta, arrays)


def load_dataset(path):
    """Read an archive written by save_dataset; returns (source, target, meta)."""
    meta, arrays = container.read_container(path)
    if meta.get("kind") != "dataset":
        raise ValidationError(f"not a dataset archive: {path}")
    groups = {"source": [], "target": []}
    for entry in meta["subjects"]:
        key = f"{entry['group']}/{entry['subject_id']}"
        labels = arrays.get(key + "/labels") if entry["has_labels"] else None
        groups[entry["group"]].append(
            Subject(
                subject_id=entry["subject_id"],
                modality=entry["modality"],
                images=arrays[key + "/images"],
                labels=labels,
                spacing=tuple(entry["spacing"]),
                tags=tuple(entry["tags"]),
                provenance=entry["provenance"],
            )
        )
    return groups["source"], groups["target"], meta
