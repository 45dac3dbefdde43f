"""Boxes, IoU, anchors, anchor assignment, box coding and NMS.

Coordinates are continuous and half-open, ``(x1, y1, x2, y2)`` with
``x1 < x2`` and ``y1 < y2``; area is ``(x2 - x1) * (y2 - y1)``. Scalar
helpers take :class:`Box` objects, array helpers take ``(N, 4)`` float
arrays in the same convention.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.4
# exp() of larger size deltas overflows or produces absurd boxes
MAX_SIZE_DELTA = 20.0


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> Box:
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    class_id: int

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0")


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor tiling over a feature pyramid.

    The anchor side at a level of stride ``s`` is
    ``base_size * scale * s / min(pyramid_strides)``, so ``base_size`` is the
    side of the unit-scale square anchor on the finest level.
    """

    pyramid_strides: tuple[int, ...] = (4, 8)
    scales: tuple[float, ...] = (1.0, 1.6, 2.5)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    base_size: float = 6.0

    def __post_init__(self) -> None:
        if not self.pyramid_strides or not self.scales or not self.aspect_ratios:
            raise ValueError("anchor config lists must be non-empty")
        if any(b <= a for a, b in zip(self.pyramid_strides, self.pyramid_strides[1:])):
            raise ValueError("pyramid strides must be strictly increasing")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("scales and aspect ratios must be positive")
        if self.base_size <= 0:
            raise ValueError("base_size must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    def to_dict(self) -> dict:
        return {
            "pyramid_strides": list(self.pyramid_strides),
            "scales": list(self.scales),
            "aspect_ratios": list(self.aspect_ratios),
            "base_size": self.base_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> AnchorConfig:
        return cls(
            pyramid_strides=tuple(int(s) for s in d["pyramid_strides"]),
            scales=tuple(float(s) for s in d["scales"]),
            aspect_ratios=tuple(float(r) for r in d["aspect_ratios"]),
            base_size=float(d["base_size"]),
        )


# anchor states
NEGATIVE = -1
IGNORED = -2


@dataclass
class Assignment:
    """Per-anchor matching result.

    ``matched[i]`` is the ground-truth index for a positive anchor,
    :data:`NEGATIVE` or :data:`IGNORED` otherwise. ``targets`` holds encoded
    regression targets for positive anchors and zeros elsewhere.
    """

    matched: np.ndarray
    targets: np.ndarray
    gt_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def positive(self) -> np.ndarray:
        return self.matched >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.matched == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.matched == IGNORED

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())

    def anchor_classes(self) -> np.ndarray:
        """Class id per anchor, -1 where the anchor is not positive."""
        out = np.full(len(self.matched), -1, dtype=np.int64)
        pos = self.positive
        out[pos] = self.gt_classes[self.matched[pos]]
        return out


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def padded_size(config: AnchorConfig, width: int, height: int) -> tuple[int, int]:
    """Smallest size >= (width, height) divisible by every stride."""
    m = math.lcm(*config.pyramid_strides)
    return -(-width // m) * m, -(-height // m) * m


def level_anchor_shapes(config: AnchorConfig, stride: int) -> list[tuple[float, float]]:
    """(width, height) of each anchor at one level, scales outer, ratios inner.

    An aspect ratio ``r`` is ``height / width``; area is preserved.
    """
    side = config.base_size * stride / config.pyramid_strides[0]
    shapes = []
    for scale in config.scales:
        s = side * scale
        for ratio in config.aspect_ratios:
            shapes.append((s / math.sqrt(ratio), s * math.sqrt(ratio)))
    return shapes


def generate_anchors(
    config: AnchorConfig,
    image_size: tuple[int, int],
    levels: Sequence[int] | None = None,
) -> np.ndarray:
    """All anchors for an image as an ``(N, 4)`` array.

    Order is level, then row, then column, then (scale, ratio), which matches
    the layout of the detector's output maps. ``image_size`` is
    ``(width, height)``; sizes not divisible by the strides are padded.
    ``levels`` restricts generation to a subset of the configured strides.
    """
    width, height = padded_size(config, *image_size)
    per_level = []
    for stride in levels or config.pyramid_strides:
        if stride not in config.pyramid_strides:
            raise ValueError(f"stride {stride} not in anchor config")
        shapes = np.array(level_anchor_shapes(config, stride))
        cols, rows = width // stride, height // stride
        cx = (np.arange(cols) + 0.5) * stride
        cy = (np.arange(rows) + 0.5) * stride
        cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
        centers = np.stack([cxx, cyy], axis=-1).reshape(-1, 1, 2)
        half = shapes[None, :, :] / 2.0
        anchors = np.concatenate([centers - half, centers + half], axis=-1)
        per_level.append(anchors.reshape(-1, 4))
    return np.concatenate(per_level, axis=0)


def count_anchors(config: AnchorConfig, image_size: tuple[int, int]) -> int:
    width, height = padded_size(config, *image_size)
    return sum((width // s) * (height // s) for s in config.pyramid_strides) * config.anchors_per_cell


def _center_size(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    acx, acy, aw, ah = _center_size(np.asarray(anchors, dtype=np.float64))
    gcx, gcy, gw, gh = _center_size(np.asarray(gts, dtype=np.float64))
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1
    )


def decode_boxes(
    anchors: np.ndarray, deltas: np.ndarray, clip: tuple[float, float] | None = None
) -> np.ndarray:
    """Inverse of :func:`encode_boxes`.

    Args:
        anchors: ``(..., 4)`` anchor boxes.
        deltas: ``(..., 4)`` offsets.
        clip: optional ``(width, height)``; output is clipped to the image.

    Raises:
        ValueError: if any size delta exceeds :data:`MAX_SIZE_DELTA` in
            magnitude or any delta is non-finite.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite box deltas")
    if np.any(np.abs(deltas[..., 2:]) > MAX_SIZE_DELTA):
        raise ValueError("size delta out of range, invalid prediction")
    acx, acy, aw, ah = _center_size(np.asarray(anchors, dtype=np.float64))
    cx = acx + deltas[..., 0] * aw
    cy = acy + deltas[..., 1] * ah
    w = aw * np.exp(deltas[..., 2])
    h = ah * np.exp(deltas[..., 3])
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if clip is not None:
        out[..., 0::2] = np.clip(out[..., 0::2], 0.0, clip[0])
        out[..., 1::2] = np.clip(out[..., 1::2], 0.0, clip[1])
    return out


def encode_box(anchor: Box, gt: Box) -> np.ndarray:
    return encode_boxes(anchor.as_array(), gt.as_array())


def decode_box(anchor: Box, t: Sequence[float], clip: tuple[float, float] | None = None) -> Box:
    return Box.from_array(decode_boxes(anchor.as_array(), np.asarray(t, dtype=np.float64), clip))


def assign_anchors(
    anchors: np.ndarray,
    gts: Sequence[LabeledBox],
    pos_thr: float = POSITIVE_IOU,
    neg_thr: float = NEGATIVE_IOU,
) -> Assignment:
    """Label anchors positive / negative / ignored against ground truth.

    An anchor is positive for its best gt when that IoU is ``>= pos_thr``,
    negative below ``neg_thr`` and ignored in between. Afterwards every gt
    with some overlapping anchor claims its best anchor (lowest index on
    ties); gts are processed in order so a later gt wins a shared anchor.
    """
    if pos_thr < neg_thr:
        raise ValueError("pos_thr must be >= neg_thr")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    targets = np.zeros((n, 4), dtype=np.float64)
    if not gts:
        return Assignment(np.full(n, NEGATIVE, dtype=np.int64), targets)

    gt_arr = boxes_to_array([g.box for g in gts])
    gt_classes = np.array([g.class_id for g in gts], dtype=np.int64)
    overlaps = iou_matrix(anchors, gt_arr)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]

    matched = np.full(n, IGNORED, dtype=np.int64)
    matched[best_iou < neg_thr] = NEGATIVE
    pos = best_iou >= pos_thr
    matched[pos] = best_gt[pos]

    for g in range(len(gts)):
        col = overlaps[:, g]
        a = int(col.argmax())
        if col[a] > 0:
            matched[a] = g

    pos = matched >= 0
    targets[pos] = encode_boxes(anchors[pos], gt_arr[matched[pos]])
    return Assignment(matched, targets, gt_classes)


def nms(dets: Sequence[Detection], iou_thr: float) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Output is ordered by descending score, ties by original position.
    """
    if not dets:
        return []
    boxes = boxes_to_array([d.box for d in dets])
    classes = np.array([d.class_id for d in dets])
    scores = np.array([d.score for d in dets])
    keep = nms_indices(boxes, scores, classes, iou_thr)
    return [dets[i] for i in keep]


def nms_indices(
    boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_thr: float
) -> np.ndarray:
    """Array form of :func:`nms`; returns kept indices in output order."""
    # stable sort on -score keeps the lower index first on ties
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep: list[int] = []
    suppressed = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        if suppressed[rank]:
            continue
        keep.append(int(i))
        rest = order[rank + 1 :]
        same = (classes[rest] == classes[i]) & ~suppressed[rank + 1 :]
        if not same.any():
            continue
        ious = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        suppressed[rank + 1 :] |= same & (ious > iou_thr)
    return np.array(keep, dtype=np.int64)
