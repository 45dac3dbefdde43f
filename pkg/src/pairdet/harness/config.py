"""Training configuration.

Every field can be set from a JSON config file and overridden from the
command line with ``--set key=value``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..detector import ModelSpec
from ..geometry import AnchorConfig, NEGATIVE_IOU, POSITIVE_IOU
from ..inputs import Variant
from ..losses import DEFAULT_GAMMA

DEFAULT_LEARNING_RATE = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = ""
    variant: str = "double"
    offset: int = 1
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 1000
    # learning rate is multiplied by lr_drop_factor once this fraction of
    # the budget has run; 1.0 keeps it constant
    lr_drop_fraction: float = 1.0
    lr_drop_factor: float = 0.1
    epochs: float | None = None
    batch_size: int = 1
    seed: int = 0
    reg_weight: float = 1.0
    gamma: float = DEFAULT_GAMMA
    alpha_mode: str = "inverse_frequency"
    pos_iou: float = POSITIVE_IOU
    neg_iou: float = NEGATIVE_IOU
    eval_every: int = 0
    eval_iou: float = 0.5
    score_thr: float = 0.05
    nms_thr: float = 0.5
    max_dets: int = 100
    backbone_widths: tuple[int, ...] = (16, 32, 64)
    feature_width: int = 32
    head_depth: int = 1
    convs_per_stage: int = 2
    pyramid_levels: tuple[int, ...] = (4, 8)
    anchor_base_size: float = 6.0
    anchor_scales: tuple[float, ...] = (1.0, 1.6, 2.5)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    init_checkpoint: str | None = None
    output_dir: str | None = None
    threads: int = 1
    log_every: int = 100

    def __post_init__(self) -> None:
        Variant(self.variant)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 0 or (self.epochs is not None and self.epochs < 0):
            raise ValueError("steps/epochs must be non-negative")
        if not 0.0 <= self.lr_drop_fraction <= 1.0 or self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_fraction must lie in [0, 1] and lr_drop_factor be > 0")
        if self.offset < 1:
            raise ValueError("offset must be a positive integer")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if self.alpha_mode not in ("inverse_frequency", "uniform"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.threads < 1:
            raise ValueError("threads must be positive")

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(
            pyramid_strides=tuple(self.pyramid_levels),
            scales=tuple(self.anchor_scales),
            aspect_ratios=tuple(self.anchor_ratios),
            base_size=self.anchor_base_size,
        )

    def model_spec(self, num_classes: int, input_mean: tuple[float, ...] | None = None) -> ModelSpec:
        return ModelSpec(
            variant=Variant(self.variant),
            num_classes=num_classes,
            anchor_config=self.anchor_config(),
            backbone_widths=tuple(self.backbone_widths),
            pyramid_levels=tuple(self.pyramid_levels),
            feature_width=self.feature_width,
            head_depth=self.head_depth,
            convs_per_stage=self.convs_per_stage,
            input_mean=input_mean,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, **kw) -> TrainConfig:
        return replace(self, **kw)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with ``value`` parsed as JSON when possible."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(value, list):
        value = tuple(value)
    return key.strip(), value


def apply_overrides(config: TrainConfig, overrides: list[str]) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    kw = {}
    for text in overrides:
        k, v = parse_override(text)
        if k not in known:
            raise ValueError(f"unknown config key {k!r}")
        kw[k] = v
    return replace(config, **kw) if kw else config


@dataclass
class ExperimentConfig:
    """Settings shared by the experiment drivers."""

    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    offsets: tuple[int, ...] = (1, 3, 5)
    band: float = 0.03
    transfer_fraction: float = 0.5
    transfer_ratio: float = 0.9
    source_dataset: str | None = None

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "seeds": list(self.seeds),
            "offsets": list(self.offsets),
            "band": self.band,
            "transfer_fraction": self.transfer_fraction,
            "transfer_ratio": self.transfer_ratio,
            "source_dataset": self.source_dataset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        train = TrainConfig.from_dict(d.pop("train", {}))
        for k in ("seeds", "offsets"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(train=train, **d)

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))
