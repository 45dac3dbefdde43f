"""Miniature RetinaNet over named parameter tensors.

The network is a plain strided conv backbone (one stage per factor of two),
a lateral + top-down feature pyramid over the selected stages, and
classification / regression heads shared across pyramid levels. Parameters
live in a flat ``{layer_path: tensor}`` dict so checkpointing and transfer
are plain dictionary operations.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import (
    AnchorConfig,
    Detection,
    Box,
    MAX_SIZE_DELTA,
    decode_boxes,
    generate_anchors,
    nms_indices,
)
from .inputs import ModelInput, Variant
from .losses import PROB_EPS

PRIOR_PROB = 0.01
CHECKPOINT_MAGIC = b"PDET1\n"
CHANNEL_ORDER = "auxiliary_first_target_last"
FINAL_CLS = ("cls_head.final.weight", "cls_head.final.bias")


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant = Variant.DOUBLE
    num_classes: int = 3
    anchor_config: AnchorConfig = field(default_factory=AnchorConfig)
    backbone_widths: tuple[int, ...] = (16, 32, 64)
    pyramid_levels: tuple[int, ...] = (4, 8)
    feature_width: int = 32
    head_depth: int = 1
    convs_per_stage: int = 2
    input_mean: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if not self.backbone_widths or any(w < 1 for w in self.backbone_widths):
            raise ValueError("backbone widths must be positive")
        strides = {2 ** (i + 1) for i in range(len(self.backbone_widths))}
        if not self.pyramid_levels or not set(self.pyramid_levels) <= strides:
            raise ValueError(f"pyramid levels {self.pyramid_levels} not produced by backbone strides {sorted(strides)}")
        if list(self.pyramid_levels) != sorted(set(self.pyramid_levels)):
            raise ValueError("pyramid levels must be strictly increasing")
        if not set(self.pyramid_levels) <= set(self.anchor_config.pyramid_strides):
            raise ValueError("pyramid levels must be a subset of the anchor strides")
        if self.input_mean is not None and len(self.input_mean) != self.input_channels:
            raise ValueError("input_mean needs one entry per input channel")

    @property
    def input_channels(self) -> int:
        return self.variant.channels

    @property
    def anchors_per_cell(self) -> int:
        return self.anchor_config.anchors_per_cell

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "input_channels": self.input_channels,
            "channel_order": CHANNEL_ORDER,
            "num_classes": self.num_classes,
            "anchor_config": self.anchor_config.to_dict(),
            "backbone_widths": list(self.backbone_widths),
            "pyramid_levels": list(self.pyramid_levels),
            "feature_width": self.feature_width,
            "head_depth": self.head_depth,
            "convs_per_stage": self.convs_per_stage,
            "input_mean": None if self.input_mean is None else list(self.input_mean),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        spec = cls(
            variant=Variant(d["variant"]),
            num_classes=int(d["num_classes"]),
            anchor_config=AnchorConfig.from_dict(d["anchor_config"]),
            backbone_widths=tuple(d["backbone_widths"]),
            pyramid_levels=tuple(d["pyramid_levels"]),
            feature_width=int(d["feature_width"]),
            head_depth=int(d["head_depth"]),
            convs_per_stage=int(d["convs_per_stage"]),
            input_mean=None if d.get("input_mean") is None else tuple(d["input_mean"]),
        )
        if "input_channels" in d and d["input_channels"] != spec.input_channels:
            raise ValueError("input_channels inconsistent with variant")
        return spec


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict[str, torch.Tensor]
    step: int = 0

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def to(self, dtype: torch.dtype) -> ModelState:
        return ModelState(self.spec, {k: v.detach().to(dtype) for k, v in self.params.items()}, self.step)

    def clone(self) -> ModelState:
        return ModelState(self.spec, {k: v.detach().clone() for k, v in self.params.items()}, self.step)

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.params.items()}


def _layer_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter in creation order."""
    out = []

    def conv(name, cin, cout, k, kind="relu"):
        out.append((f"{name}.weight", (cout, cin, k, k), kind))
        out.append((f"{name}.bias", (cout,), "zero"))

    cin = spec.input_channels
    for i, width in enumerate(spec.backbone_widths):
        for j in range(spec.convs_per_stage):
            conv(f"backbone.stage{i}.conv{j}", cin, width, 3)
            cin = width
    fw = spec.feature_width
    for stride in spec.pyramid_levels:
        stage = int(math.log2(stride)) - 1
        conv(f"fpn.lateral{stride}", spec.backbone_widths[stage], fw, 1, kind="linear")
        conv(f"fpn.smooth{stride}", fw, fw, 3, kind="linear")
    a = spec.anchors_per_cell
    for head, n_out in (("cls_head", a * spec.num_classes), ("reg_head", a * 4)):
        for d in range(spec.head_depth):
            conv(f"{head}.conv{d}", fw, fw, 3)
        out.append((f"{head}.final.weight", (n_out, fw, 3, 3), "head"))
        out.append((f"{head}.final.bias", (n_out,), "prior" if head == "cls_head" else "zero"))
    return out


def build_model(spec: ModelSpec, seed: int = 0) -> ModelState:
    """Deterministically initialised model.

    Hidden convs get He-normal weights; head outputs start small, and the
    classification bias sits at ``-log((1 - 0.01) / 0.01)`` so every anchor
    starts near foreground probability 0.01.
    """
    gen = torch.Generator().manual_seed(int(seed))
    params: dict[str, torch.Tensor] = {}
    for name, shape, kind in _layer_shapes(spec):
        if kind == "zero":
            t = torch.zeros(shape)
        elif kind == "prior":
            t = torch.full(shape, -math.log((1.0 - PRIOR_PROB) / PRIOR_PROB))
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            std = {"relu": math.sqrt(2.0 / fan_in), "linear": math.sqrt(1.0 / fan_in), "head": 0.01}[kind]
            t = torch.randn(shape, generator=gen) * std
        params[name] = t
    return ModelState(spec, params, 0)


def _conv(x, params, name, stride=1):
    w = params[f"{name}.weight"]
    return F.conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=w.shape[-1] // 2)


def padded_hw(spec: ModelSpec, height: int, width: int) -> tuple[int, int]:
    m = 2 ** len(spec.backbone_widths)
    m = math.lcm(m, *spec.anchor_config.pyramid_strides)
    return -(-height // m) * m, -(-width // m) * m


def forward_tensor(
    spec: ModelSpec, params: dict[str, torch.Tensor], x: torch.Tensor
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Raw forward on a ``(B, C, H, W)`` tensor.

    Returns per pyramid level ``(class_logits, box_deltas)`` shaped
    ``(B, A*K, h, w)`` and ``(B, A*4, h, w)``. H and W must already be
    padded (see :func:`padded_hw`).
    """
    if x.shape[1] != spec.input_channels:
        raise ValueError(f"model expects {spec.input_channels} channels, input has {x.shape[1]}")
    if spec.input_mean is not None:
        x = x - torch.tensor(spec.input_mean, dtype=x.dtype).view(1, -1, 1, 1)
    feats = []
    h = x
    for i in range(len(spec.backbone_widths)):
        for j in range(spec.convs_per_stage):
            h = F.relu(_conv(h, params, f"backbone.stage{i}.conv{j}", stride=2 if j == 0 else 1))
        feats.append(h)

    pyramid: dict[int, torch.Tensor] = {}
    top = None
    for stride in reversed(spec.pyramid_levels):
        lat = _conv(feats[int(math.log2(stride)) - 1], params, f"fpn.lateral{stride}")
        if top is not None:
            lat = lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
        top = lat
        pyramid[stride] = _conv(lat, params, f"fpn.smooth{stride}")

    out = []
    for stride in spec.pyramid_levels:
        p = pyramid[stride]
        c = r = p
        for d in range(spec.head_depth):
            c = F.relu(_conv(c, params, f"cls_head.conv{d}"))
            r = F.relu(_conv(r, params, f"reg_head.conv{d}"))
        out.append((_conv(c, params, "cls_head.final"), _conv(r, params, "reg_head.final")))
    return out


def input_tensor(spec: ModelSpec, inp: ModelInput, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``(1, C, H', W')`` tensor, zero-padded right/bottom to the stride grid."""
    if inp.channels.shape[2] != spec.input_channels:
        raise ValueError(f"model expects {spec.input_channels} channels, input has {inp.channels.shape[2]}")
    h, w = inp.channels.shape[:2]
    ph, pw = padded_hw(spec, h, w)
    x = torch.from_numpy(np.ascontiguousarray(inp.channels.transpose(2, 0, 1))).to(dtype)
    if (ph, pw) != (h, w):
        x = F.pad(x, (0, pw - w, 0, ph - h))
    return x.unsqueeze(0)


def flatten_outputs(
    spec: ModelSpec, outputs: list[tuple[torch.Tensor, torch.Tensor]]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Concatenate levels into ``(N, K)`` logits and ``(N, 4)`` deltas in
    anchor order (level, row, column, anchor shape)."""
    k = spec.num_classes
    cls = [c[0].permute(1, 2, 0).reshape(-1, k) for c, _ in outputs]
    reg = [r[0].permute(1, 2, 0).reshape(-1, 4) for _, r in outputs]
    return torch.cat(cls), torch.cat(reg)


def forward(model: ModelState, inp: ModelInput) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Per-level ``(class probabilities, box deltas)`` maps.

    Shapes are ``(h, w, A*K)`` and ``(h, w, A*4)`` with ``h = H/s``,
    ``w = W/s`` for the padded input size.
    """
    dtype = next(iter(model.params.values())).dtype
    outs = forward_tensor(model.spec, model.params, input_tensor(model.spec, inp, dtype))
    return [(torch.sigmoid(c[0]).permute(1, 2, 0), r[0].permute(1, 2, 0)) for c, r in outs]


def model_anchors(spec: ModelSpec, height: int, width: int) -> np.ndarray:
    """Anchors matching :func:`flatten_outputs` ordering for an input size."""
    ph, pw = padded_hw(spec, height, width)
    return generate_anchors(spec.anchor_config, (pw, ph), spec.pyramid_levels)


def predict(
    model: ModelState,
    inp: ModelInput,
    score_thr: float = 0.05,
    nms_thr: float = 0.5,
    max_dets: int = 100,
    pre_nms_top: int = 1000,
) -> list[Detection]:
    h, w = inp.channels.shape[:2]
    with torch.no_grad():
        dtype = next(iter(model.params.values())).dtype
        logits, deltas = flatten_outputs(
            model.spec, forward_tensor(model.spec, model.params, input_tensor(model.spec, inp, dtype))
        )
    probs = torch.sigmoid(logits.double()).numpy().clip(0.0, 1.0 - PROB_EPS)
    deltas = deltas.double().numpy()
    anchor_idx, cls_idx = np.nonzero(probs >= score_thr)
    if len(anchor_idx) == 0:
        return []
    scores = probs[anchor_idx, cls_idx]
    if len(scores) > pre_nms_top:
        top = np.argsort(-scores, kind="stable")[:pre_nms_top]
        anchor_idx, cls_idx, scores = anchor_idx[top], cls_idx[top], scores[top]
    d = deltas[anchor_idx]
    ok = np.all(np.isfinite(d), axis=1) & np.all(np.abs(d[:, 2:]) <= MAX_SIZE_DELTA, axis=1)
    anchors = model_anchors(model.spec, h, w)[anchor_idx[ok]]
    boxes = decode_boxes(anchors, d[ok], clip=(w, h))
    cls_idx, scores = cls_idx[ok], scores[ok]
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, cls_idx, scores = boxes[valid], cls_idx[valid], scores[valid]
    keep = nms_indices(boxes, scores, cls_idx, nms_thr)[:max_dets]
    return [Detection(Box.from_array(boxes[i]), int(cls_idx[i]), float(scores[i])) for i in keep]


def _transfer_key(spec: ModelSpec) -> dict:
    d = spec.to_dict()
    d.pop("num_classes")
    d.pop("input_mean")
    return d


def transfer_weights(src: ModelState, dst: ModelState) -> ModelState:
    """Copy ``src`` weights into a copy of ``dst``.

    The final classification conv is copied only when class counts agree;
    otherwise it keeps ``dst``'s initialisation. Input normalisation is a
    property of the destination data and is left untouched.
    """
    if _transfer_key(src.spec) != _transfer_key(dst.spec):
        raise ValueError("architectures differ beyond the class count")
    same_classes = src.spec.num_classes == dst.spec.num_classes
    params = {}
    for name, t in dst.params.items():
        if name in FINAL_CLS and not same_classes:
            params[name] = t.detach().clone()
            continue
        s = src.params[name]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(s.shape)} vs {tuple(t.shape)}")
        params[name] = s.detach().clone().to(t.dtype)
    return ModelState(dst.spec, params, 0)


def save_checkpoint(model: ModelState, path: str | Path) -> None:
    """Write ``PDET1`` magic, a length-prefixed JSON header and raw
    little-endian float32 tensors in header order."""
    names = sorted(model.params)
    blobs, entries, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name].detach().cpu().numpy().astype("<f4"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": "PDET1", "spec": model.spec.to_dict(), "step": model.step, "tensors": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> ModelState:
    raw = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if raw[:n] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a PDET1 checkpoint")
    if len(raw) < n + 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[n : n + 8])
    body = n + 8 + hlen
    try:
        header = json.loads(raw[n + 8 : body])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    spec = ModelSpec.from_dict(header["spec"])
    params = {}
    for e in header["tensors"]:
        start = body + e["offset"]
        chunk = raw[start : start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        params[e["name"]] = torch.from_numpy(np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).copy())
    expected = {name for name, _, _ in _layer_shapes(spec)}
    if set(params) != expected:
        raise ValueError(f"{path}: parameter set does not match spec")
    return ModelState(spec, params, int(header["step"]))


def with_input_mean(spec: ModelSpec, mean: tuple[float, ...] | None) -> ModelSpec:
    return replace(spec, input_mean=mean)
