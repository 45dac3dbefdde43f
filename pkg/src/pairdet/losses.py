"""Focal classification loss, smooth-L1 regression loss and their sum.

Scalar functions (``focal_loss``, ``smooth_l1`` and their gradients) are
plain floats. :func:`detection_loss_terms` is the batched torch version used
for training; its focal part backpropagates through :func:`focal_loss_grad`'s
closed form rather than through autograd's own derivative.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Assignment

PROB_EPS = 1e-7
DEFAULT_GAMMA = 2.0


@dataclass(frozen=True)
class FocalParams:
    """Focusing exponent and per-class weights.

    ``alpha[k]`` weights the positive term of class ``k``; negatives use
    ``background_alpha``.
    """

    gamma: float = DEFAULT_GAMMA
    alpha: tuple[float, ...] = (1.0,)
    background_alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not self.alpha or any(a <= 0 for a in self.alpha) or self.background_alpha <= 0:
            raise ValueError("alpha weights must be positive")

    @classmethod
    def uniform(cls, num_classes: int, gamma: float = DEFAULT_GAMMA) -> FocalParams:
        return cls(gamma=gamma, alpha=(1.0,) * num_classes)

    @classmethod
    def from_class_counts(
        cls, counts: Sequence[int], gamma: float = DEFAULT_GAMMA, background_alpha: float = 1.0
    ) -> FocalParams:
        """Inverse class frequency weights, rescaled to mean 1.

        Classes never seen count as seen once.
        """
        inv = 1.0 / np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
        inv = inv / inv.mean()
        return cls(gamma=gamma, alpha=tuple(float(a) for a in inv), background_alpha=background_alpha)

    def alpha_t(self, y: int, class_id: int) -> float:
        return self.alpha[class_id] if y == 1 else self.background_alpha


@dataclass(frozen=True)
class LossValue:
    classification: float
    regression: float
    reg_weight: float = 1.0
    total: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "total", self.classification + self.reg_weight * self.regression)


def _check_prob(p: float) -> float:
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"probability {p} outside [0, 1]")
    return min(max(p, PROB_EPS), 1.0 - PROB_EPS)


def focal_loss(p: float, y: int, params: FocalParams, class_id: int = 0) -> float:
    """``-alpha_t * (1 - p')**gamma * log(p')`` where ``p'`` is the
    probability given to the true outcome."""
    p = _check_prob(p)
    pt = p if y == 1 else 1.0 - p
    return -params.alpha_t(y, class_id) * (1.0 - pt) ** params.gamma * math.log(pt)


def focal_loss_grad(p: float, y: int, params: FocalParams, class_id: int = 0) -> float:
    """d(focal_loss)/dp. Zero where clamping makes the loss flat in p."""
    raw = p
    p = _check_prob(p)
    if raw != p:
        return 0.0
    pt = p if y == 1 else 1.0 - p
    a = params.alpha_t(y, class_id)
    g = params.gamma
    d_pt = -a * (1.0 - pt) ** g / pt
    if g != 0:
        d_pt += a * g * (1.0 - pt) ** (g - 1.0) * math.log(pt)
    return d_pt if y == 1 else -d_pt


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def smooth_l1_grad(x: float) -> float:
    return x if abs(x) < 1.0 else math.copysign(1.0, x)


class _FocalFn(torch.autograd.Function):
    """Elementwise focal loss on already-clamped probabilities."""

    @staticmethod
    def forward(ctx, p, y, alpha_t, gamma):
        pt = torch.where(y > 0, p, 1.0 - p)
        ctx.save_for_backward(pt, y, alpha_t)
        ctx.gamma = gamma
        return -alpha_t * (1.0 - pt) ** gamma * torch.log(pt)

    @staticmethod
    def backward(ctx, grad_out):
        pt, y, alpha_t = ctx.saved_tensors
        g = ctx.gamma
        d_pt = -alpha_t * (1.0 - pt) ** g / pt
        if g != 0:
            d_pt = d_pt + alpha_t * g * (1.0 - pt) ** (g - 1.0) * torch.log(pt)
        d_p = torch.where(y > 0, d_pt, -d_pt)
        return grad_out * d_p, None, None, None


def focal_loss_elementwise(
    probs: torch.Tensor, onehot: torch.Tensor, params: FocalParams
) -> torch.Tensor:
    """Batched focal loss, ``probs`` and ``onehot`` shaped ``(N, K)``."""
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    alpha = torch.tensor(params.alpha, dtype=p.dtype)
    alpha_t = torch.where(onehot > 0, alpha.expand_as(p), torch.full_like(p, params.background_alpha))
    return _FocalFn.apply(p, onehot, alpha_t, float(params.gamma))


def smooth_l1_elementwise(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def detection_loss_terms(
    cls_probs: torch.Tensor,
    reg_preds: torch.Tensor,
    assignment: Assignment,
    params: FocalParams,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized (classification, regression) loss tensors.

    Both are summed over non-ignored anchors (classification) or positive
    anchors (regression) and divided by ``max(1, num_positive)``.
    """
    n, k = cls_probs.shape
    if reg_preds.shape != (n, 4) or len(assignment.matched) != n:
        raise ValueError(
            f"shape mismatch: cls {tuple(cls_probs.shape)}, reg {tuple(reg_preds.shape)}, "
            f"{len(assignment.matched)} anchors assigned"
        )
    if len(params.alpha) != k:
        raise ValueError(f"{len(params.alpha)} alpha weights for {k} classes")
    dtype = cls_probs.dtype
    classes = assignment.anchor_classes()
    valid = torch.from_numpy(~assignment.ignored)
    onehot = torch.zeros((n, k), dtype=dtype)
    pos_idx = np.nonzero(classes >= 0)[0]
    onehot[torch.from_numpy(pos_idx), torch.from_numpy(classes[pos_idx])] = 1.0

    normalizer = float(max(1, len(pos_idx)))
    cls_loss = focal_loss_elementwise(cls_probs[valid], onehot[valid], params).sum() / normalizer
    if len(pos_idx):
        pos = torch.from_numpy(pos_idx)
        targets = torch.as_tensor(assignment.targets[pos_idx], dtype=dtype)
        reg_loss = smooth_l1_elementwise(reg_preds[pos] - targets).sum() / normalizer
    else:
        reg_loss = reg_preds.sum() * 0.0
    return cls_loss, reg_loss


def detection_loss(
    cls_probs,
    reg_preds,
    assignment: Assignment,
    params: FocalParams,
    reg_weight: float = 1.0,
) -> LossValue:
    """Focal + weighted smooth-L1 loss for one image, as plain floats.

    Accepts numpy arrays or torch tensors.
    """
    cls_t = torch.as_tensor(np.asarray(cls_probs) if not torch.is_tensor(cls_probs) else cls_probs)
    reg_t = torch.as_tensor(np.asarray(reg_preds) if not torch.is_tensor(reg_preds) else reg_preds)
    with torch.no_grad():
        c, r = detection_loss_terms(cls_t.double(), reg_t.double(), assignment, params)
    return LossValue(float(c), float(r), reg_weight)
