"""Network inputs for the three detector variants.

Arrays are ``(height, width, channels)``. Two-frame inputs always put the
auxiliary channels (preceding frame or its flow image) first and the target
frame last, so ``x[..., -3:]`` is the target image bit for bit.
"""

from __future__ import annotations

import enum
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .flow import FLOW_METHODS, FlowParams, farneback_flow, flow_image

PIXEL_DTYPE = np.float32


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    DOUBLE = "double"
    FLOW = "flow"

    @property
    def channels(self) -> int:
        return 3 if self is Variant.BASELINE else 6


@dataclass
class Frame:
    pixels: np.ndarray
    time_index: int = 0

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=PIXEL_DTYPE)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or min(self.pixels.shape[:2]) < 1:
            raise ValueError(f"frame must be (H, W, 3), got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class FramePair:
    """A target frame with the frame ``offset`` steps before it.

    ``offset == 0`` marks a pair whose preceding frame is the target itself
    (sequence start or single-image fallback).
    """

    preceding: Frame
    target: Frame
    offset: int

    def __post_init__(self) -> None:
        if self.offset < 0:
            raise ValueError("offset must be >= 0")
        if self.preceding.pixels.shape != self.target.pixels.shape:
            raise ValueError(
                f"frame size mismatch {self.preceding.pixels.shape} vs {self.target.pixels.shape}"
            )
        if self.preceding.time_index != self.target.time_index - self.offset:
            raise ValueError("preceding.time_index must equal target.time_index - offset")


@dataclass
class ModelInput:
    channels: np.ndarray
    variant: Variant

    def __post_init__(self) -> None:
        self.variant = Variant(self.variant)
        if self.channels.ndim != 3 or self.channels.shape[2] != self.variant.channels:
            raise ValueError(
                f"{self.variant.value} input needs {self.variant.channels} channels, "
                f"got shape {self.channels.shape}"
            )

    @property
    def target(self) -> np.ndarray:
        return self.channels[..., -3:]


def build_baseline_input(frame: Frame) -> ModelInput:
    return ModelInput(frame.pixels.copy(), Variant.BASELINE)


def build_double_input(pair: FramePair) -> ModelInput:
    return ModelInput(
        np.concatenate([pair.preceding.pixels, pair.target.pixels], axis=-1), Variant.DOUBLE
    )


def build_flow_input(
    pair: FramePair, flow_params: FlowParams | None = None, method: str = "farneback"
) -> ModelInput:
    if method == "farneback":
        field = farneback_flow(pair.preceding.pixels, pair.target.pixels, flow_params)
    else:
        field = FLOW_METHODS[method](pair.preceding.pixels, pair.target.pixels)
    flow = flow_image(field).astype(PIXEL_DTYPE)
    return ModelInput(np.concatenate([flow, pair.target.pixels], axis=-1), Variant.FLOW)


def build_input(
    pair: FramePair, variant: Variant | str, flow_params: FlowParams | None = None
) -> ModelInput:
    variant = Variant(variant)
    if variant is Variant.BASELINE:
        return build_baseline_input(pair.target)
    if variant is Variant.DOUBLE:
        return build_double_input(pair)
    return build_flow_input(pair, flow_params)


def select_preceding(sequence: Sequence[Frame], t: int, i: int = 1) -> FramePair:
    """Pair frame ``t`` with frame ``max(t - i, 0)``.

    Only frames at or before ``t`` are touched.
    """
    if not sequence:
        raise ValueError("empty sequence")
    if i < 1:
        raise ValueError("offset i must be positive")
    if not 0 <= t < len(sequence):
        raise IndexError(f"t={t} outside sequence of length {len(sequence)}")
    p = max(t - i, 0)
    target, preceding = sequence[t], sequence[p]
    return FramePair(preceding, target, target.time_index - preceding.time_index)


def duplicate_fallback(target: Frame) -> FramePair:
    return FramePair(target, target, 0)
