"""Training configuration and the key=value config-file dialect.

A config file is UTF-8 text with one ``key=value`` per line and ``#``
comments. Keys mirror the config dataclasses, sub-configs carrying a dotted
prefix (``model.growth_rate=8``, ``augment.rotation_max_deg=15``,
``loss.alpha=0.25``, ``synth.count=40``); plain keys belong to the training
run itself (``lr``, ``batch_size``, ``seed``, ...). Every key is optional;
unknown keys are rejected with their line number. The same dialect is
embedded into weight archives so a saved model carries the exact
configuration that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .blocks import AvNetConfig
from .data import AugmentSpec, SynthSpec
from .losses import LossConfig


class ConfigError(ValueError):
    """Malformed config text; the message carries the offending line number."""


LOSS_MODES = ("compound", "dice_only")


@dataclass
class TrainConfig:
    model: AvNetConfig = field(default_factory=AvNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    lr: float = 1e-4
    batch_size: int = 8
    train_samples_per_fold: int = 3000
    k_folds: int = 5
    seed: int = 42
    loss_mode: str = "compound"
    eval_every: int = 50
    checkpoint_dir: str = "runs"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.train_samples_per_fold < self.batch_size:
            raise ValueError("train_samples_per_fold must be at least batch_size")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be at least 1, got {self.eval_every}")


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(text)


def _str(text: str) -> str:
    return text


def _loss_mode(text: str) -> str:
    if text not in LOSS_MODES:
        raise ValueError(f"must be one of {', '.join(LOSS_MODES)}")
    return text


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",")]


def _int_pair(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated integers")
    return parts[0], parts[1]


def _float_pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated numbers")
    return parts[0], parts[1]


# key -> parser; the three tables below drive parsing, validation, and
# round-trip serialization, so they must stay in sync with the dataclasses.
_TRAIN_KEYS = {
    "lr": _float,
    "batch_size": _int,
    "train_samples_per_fold": _int,
    "k_folds": _int,
    "seed": _int,
    "loss_mode": _loss_mode,
    "eval_every": _int,
    "checkpoint_dir": _str,
}

_PREFIXED_KEYS = {
    "model.dense_block_layers": _int_list,
    "model.growth_rate": _int,
    "model.stem_channels": _int,
    "model.transition_compression": _float,
    "model.decoder_channels": _int_list,
    "model.num_classes": _int,
    "model.input_channels": _int,
    "model.input_size": _int,
    "loss.alpha": _float,
    "loss.gamma": _float,
    "loss.dice_smooth": _float,
    "loss.prob_clamp": _float,
    "augment.flip_h_prob": _float,
    "augment.flip_v_prob": _float,
    "augment.rotation_max_deg": _float,
    "augment.zoom_range": _float_pair,
    "augment.shift_max_frac": _float,
    "synth.count": _int,
    "synth.size": _int,
    "synth.vessels_per_image": _int_pair,
    "synth.vessel_width_px": _float_pair,
    "synth.artery_oct_intensity": _float_pair,
    "synth.vein_oct_intensity": _float_pair,
    "synth.noise_sigma": _float,
}

KNOWN_KEYS = {**_TRAIN_KEYS, **_PREFIXED_KEYS}


def parse_config_text(text: str) -> dict[str, object]:
    """Parse config text into a validated key -> value mapping."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = KNOWN_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return values


def parse_config_file(path: str | Path) -> dict[str, object]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def _build_section(cls, values: Mapping[str, object], prefix: str):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key in values:
            kwargs[f.name] = values[key]
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config_from(values: Mapping[str, object]) -> TrainConfig:
    kwargs = {key: values[key] for key in _TRAIN_KEYS if key in values}
    try:
        return TrainConfig(
            model=_build_section(AvNetConfig, values, "model"),
            loss=_build_section(LossConfig, values, "loss"),
            augment=_build_section(AugmentSpec, values, "augment"),
            **kwargs,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def synth_spec_from(values: Mapping[str, object]) -> SynthSpec:
    return _build_section(SynthSpec, values, "synth")


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_train_config(cfg: TrainConfig) -> str:
    """Emit every key in a stable order; parse_config_text inverts this.

    checkpoint_dir is deliberately left out: it names a local output
    location, and embedding it (e.g. in weight archives) would make two
    otherwise identical runs produce different bytes.
    """
    lines = []
    for key in _TRAIN_KEYS:
        if key == "checkpoint_dir":
            continue
        lines.append(f"{key}={_format_value(getattr(cfg, key))}")
    for section, prefix in ((cfg.model, "model"), (cfg.loss, "loss"), (cfg.augment, "augment")):
        for f in fields(type(section)):
            lines.append(f"{prefix}.{f.name}={_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"
