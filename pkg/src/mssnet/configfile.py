"""Experiment configuration: a flat `key = value` text format.

Values are parsed as JSON where possible (numbers, booleans, lists) and
kept as strings otherwise.  Command-line flags override file values, so a
config file plus the printed overrides fully records an experiment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError, MalformedFileError
from .network import MssNetConfig


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_file(path) -> dict:
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedFileError(f"{path}:{lineno}: expected 'key = value'")
        key, text = line.split("=", 1)
        values[key.strip()] = _parse_value(text.strip())
    return values


def apply_overrides(values: dict, overrides) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        values[key.strip()] = _parse_value(text.strip())
    return values


_DATASET_DEFAULTS = {
    # dataset -> (num_classes, in_channels)
    "synthetic": (3, None),
    "kitti": (19, None),
    "s3dis": (13, 6),
}

_SYNTH_FEATURE_WIDTH = {"const": 1, "const_z": 2, "full": 3}


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    data_root: str | None = None
    voxel_size: float = 0.05
    num_classes: int | None = None
    in_channels: int | None = None
    encoder_channels: tuple = (32, 64, 128, 256)
    decoder_channels: tuple = (128, 96, 96)
    mffm_kernels: tuple = (3, 5, 7)
    reduction: int = 4
    use_mffm: bool = True
    use_acffm: bool = True
    per_channel_scores: bool = False
    w_ce: float = 1.0
    w_lovasz: float = 1.0
    lr: float = 0.24
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 4
    batch_size: int = 1
    schedule: str = "cosine"
    seed: int = 0
    max_steps: int | None = None
    augment: bool = True
    scale_range: tuple = (0.95, 1.05)
    translation_range: float = 0.2
    jitter_sigma: float = 0.01
    kitti_feature_channels: int = 4
    max_scenes: int | None = None
    synth_train_scenes: int = 6
    synth_val_scenes: int = 2
    synth_points: int = 4000
    synth_features: str = "const_z"
    synth_seed: int = 1000

    def __post_init__(self):
        if self.dataset not in _DATASET_DEFAULTS:
            raise ConfigurationError(
                f"unknown dataset {self.dataset!r}; expected one of "
                f"{sorted(_DATASET_DEFAULTS)}"
            )
        default_classes, default_channels = _DATASET_DEFAULTS[self.dataset]
        if self.num_classes is None:
            self.num_classes = default_classes
        if self.in_channels is None:
            if self.dataset == "synthetic":
                self.in_channels = _SYNTH_FEATURE_WIDTH[self.synth_features]
            elif self.dataset == "kitti":
                self.in_channels = self.kitti_feature_channels
            else:
                self.in_channels = default_channels
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        self.mffm_kernels = tuple(self.mffm_kernels)
        self.scale_range = tuple(self.scale_range)

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(
                f"unknown config keys: {sorted(unknown)}; known keys: {sorted(known)}"
            )
        return cls(**values)

    def network_config(self) -> MssNetConfig:
        return MssNetConfig(
            in_channels=self.in_channels,
            num_classes=self.num_classes,
            encoder_channels=self.encoder_channels,
            decoder_channels=self.decoder_channels,
            mffm_kernels=self.mffm_kernels,
            reduction=self.reduction,
            use_mffm=self.use_mffm,
            use_acffm=self.use_acffm,
            per_channel_scores=self.per_channel_scores,
        )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out
