"""Run configuration: every knob of a training/evaluation run.

Stored as flat ``key = value`` text.  Unknown keys and untypable values
are rejected with the field name before any computation.  A value of 0
for batch_size or base_channels means "resolve by spatial rank"
(batch 64 / width 8 in 2D, batch 12 / width 8 in 3D); resolution happens
at load time so written configs always round-trip losslessly.
"""

import dataclasses
from dataclasses import dataclass

from .model import VARIANTS


class ConfigError(Exception):
    """Invalid configuration content."""


@dataclass
class RunConfig:
    # model
    variant: str = "PCNet"
    spatial_rank: int = 2
    base_channels: int = 0
    levels: int = 3
    # loss
    lambda2: float = 0.67
    lambda3: float = 0.33
    # optimizer / loop
    learning_rate: float = 0.001
    batch_size: int = 0
    epochs: int = 5
    seed: int = 0
    holdout_fraction: float = 0.2
    # sampling
    patches: int = 5000
    vessel_per_scan: int = 105
    background_per_scan: int = 17
    patch_size: int = 48
    stride: int = 24
    # preprocessing
    preprocess: str = "auto"   # auto | clahe_gamma | hu | none
    clahe_tiles: int = 8
    clahe_clip: float = 2.0
    gamma: float = 1.2
    augment_copies: int = 3
    # inference / post-processing
    threshold: float = 0.5
    min_component_size: int = 40
    postfilter: str = "auto"   # auto (3D only) | on | off
    # synthesis
    synth_images: int = 20
    synth_extent: int = 192
    synth_branches: int = 6
    synth_trees: int = 2
    synth_noise: float = 0.08
    synth_width_min: float = 1.0
    synth_width_max: float = 4.0
    # paths
    manifest: str = ""
    checkpoint: str = ""
    image: str = ""
    predictions: str = ""
    regions: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: {self.variant!r} not one of {VARIANTS}")
        if self.spatial_rank not in (2, 3):
            raise ConfigError(f"spatial_rank: must be 2 or 3, got {self.spatial_rank}")
        if self.batch_size == 0:
            self.batch_size = 64 if self.spatial_rank == 2 else 12
        if self.base_channels == 0:
            # desk-scale defaults: thin 2D models keep the full ablation
            # ladder affordable on a small CPU; Table-2-scale widths live
            # in configs/reference_2d.cfg
            self.base_channels = 4 if self.spatial_rank == 2 else 8
        if self.base_channels < 4 or self.base_channels % 4:
            raise ConfigError(f"base_channels: {self.base_channels} must be >= 4 "
                              "and divisible by 4")
        if not 0.0 <= self.lambda2 <= 1.0 or not 0.0 <= self.lambda3 <= 1.0:
            raise ConfigError("lambda2/lambda3: outside [0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate: must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction: outside [0, 1)")
        if self.preprocess not in ("auto", "clahe_gamma", "hu", "none"):
            raise ConfigError(f"preprocess: unknown mode {self.preprocess!r}")
        if self.postfilter not in ("auto", "on", "off"):
            raise ConfigError(f"postfilter: unknown mode {self.postfilter!r}")
        if self.patch_size % 4:
            raise ConfigError("patch_size: must be divisible by 4 for the "
                              "multi-scale loss")

    # -- serialization --------------------------------------------------

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text, overrides=None):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {ln}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"unknown config field {key!r} (line {ln})")
            ftype = fields[key].type
            tname = ftype if isinstance(ftype, str) else ftype.__name__
            try:
                if tname == "int":
                    kwargs[key] = int(value)
                elif tname == "float":
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r} as {tname}")
        if overrides:
            kwargs.update(overrides)
        return cls(**kwargs)

    @classmethod
    def load(cls, path, overrides=None):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        return cls.from_text(text, overrides)

    def resolved_preprocess(self):
        if self.preprocess != "auto":
            return self.preprocess
        return "clahe_gamma" if self.spatial_rank == 2 else "none"

    def resolved_postfilter(self):
        if self.postfilter != "auto":
            return self.postfilter == "on"
        return self.spatial_rank == 3
