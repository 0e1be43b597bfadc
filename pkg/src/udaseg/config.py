"""INI-based run configuration.

Defaults come from the dataclasses in data.py / training.py / losses.py.
An optional INI file overlays the defaults, and dotted ``section.key=value``
override strings (from a CLI ``--set``) overlay the file. The fully resolved
configuration can be written back out so every run directory records exactly
what it ran with.
"""

import configparser
import dataclasses
import io

from .ablation import variant_config
from .data import SynthConfig
from .errors import ConfigError
from .losses import LossWeights
from .training import BundleConfig, PretrainConfig, TrainConfig

# Section name -> dataclass type. The train section also accepts "variant",
# which is resolved through the ablation registry rather than parsed.
_SECTIONS = {
    "data": SynthConfig,
    "models": BundleConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "weights": LossWeights,
}

# TrainConfig fields that are built from other sections, not parsed directly.
_TRAIN_COMPOSITE = ("weights", "variant")

_BOOL_STRINGS = {
    "1": True, "true": True, "yes": True, "on": True,
    "0": False, "false": False, "no": False, "off": False,
}


@dataclasses.dataclass
class RunConfig:
    """Everything a run needs, grouped by concern."""

    data: SynthConfig
    models: BundleConfig
    pretrain: PretrainConfig
    train: TrainConfig
    variant_name: str = "Proposed"


def _parse_value(raw, reference):
    """Parse ``raw`` (a string) to match the type of ``reference``."""
    if isinstance(reference, bool):
        key = raw.strip().lower()
        if key not in _BOOL_STRINGS:
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return _BOOL_STRINGS[key]
    if isinstance(reference, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}")
    if isinstance(reference, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}")
    if isinstance(reference, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if reference and isinstance(reference[0], float):
            return tuple(float(p) for p in parts)
        if reference and isinstance(reference[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    return raw


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _field_defaults(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def _collect(parser, overrides):
    """Merge file sections and dotted overrides into {section: {key: raw}}."""
    raw = {name: {} for name in _SECTIONS}
    if parser is not None:
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                raw[section][key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        dotted, value = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override {item!r} is not section.key=value")
        section, key = dotted.split(".", 1)
        section = section.strip()
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        raw[section][key.strip()] = value.strip()
    return raw


def _build_section(cls, raw_items, skip=()):
    defaults = _field_defaults(cls)
    kwargs = {}
    for key, value in raw_items.items():
        if key in skip:
            continue
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} for section "
                              f"[{_section_of(cls)}]")
        try:
            kwargs[key] = _parse_value(value, defaults[key])
        except ConfigError as exc:
            raise ConfigError(f"{_section_of(cls)}.{key}: {exc}")
    return cls(**kwargs)


def _section_of(cls):
    for name, c in _SECTIONS.items():
        if c is cls:
            return name
    return cls.__name__


def load_config(path=None, overrides=()):
    """Build a RunConfig from defaults + optional INI file + overrides."""
    parser = None
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        with open(path) as fh:
            parser.read_file(fh)
    raw = _collect(parser, overrides)

    variant_name = raw["train"].pop("variant", "Proposed")
    variant = variant_config(variant_name)

    data_cfg = _build_section(SynthConfig, raw["data"])
    model_cfg = _build_section(BundleConfig, raw["models"])
    # Unless set explicitly, the networks follow the data's slice size.
    if "image_size" not in raw["models"]:
        model_cfg = dataclasses.replace(model_cfg,
                                        image_size=data_cfg.image_size)
    pretrain_cfg = _build_section(PretrainConfig, raw["pretrain"])
    weights = _build_section(LossWeights, raw["weights"])
    train_cfg = _build_section(TrainConfig, raw["train"],
                               skip=_TRAIN_COMPOSITE)
    train_cfg = dataclasses.replace(train_cfg, weights=weights,
                                    variant=variant)
    if model_cfg.image_size != data_cfg.image_size:
        raise ConfigError(
            f"models.image_size ({model_cfg.image_size}) must match "
            f"data.image_size ({data_cfg.image_size})")
    return RunConfig(data=data_cfg, models=model_cfg, pretrain=pretrain_cfg,
                     train=train_cfg, variant_name=variant_name)


def resolved_text(cfg):
    """Render the fully resolved configuration as INI text."""
    parser = configparser.ConfigParser()
    sections = {
        "data": cfg.data,
        "models": cfg.models,
        "pretrain": cfg.pretrain,
        "train": cfg.train,
        "weights": cfg.train.weights,
    }
    for name, obj in sections.items():
        parser.add_section(name)
        for f in dataclasses.fields(obj):
            if name == "train" and f.name in _TRAIN_COMPOSITE:
                continue
            parser.set(name, f.name, _format_value(getattr(obj, f.name)))
        if name == "train":
            parser.set(name, "variant", cfg.variant_name)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_resolved(cfg, path):
    with open(path, "w") as fh:
        fh.write(resolved_text(cfg))
    return path
