"""Detection evaluation: greedy IoU matching, PR curves, AP and mAP.

AP is the exact area under the all-points interpolated precision envelope.
Detections are pooled over frames per class; score ties are broken by
pooled position (frame order, then detection order within the frame).
"""

from __future__ import annotations

import csv
import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box, Detection, LabeledBox, boxes_to_array, iou_matrix

IOU_PRESETS = {"strict": 0.7, "loose": 0.5}
SCENARIO_TAGS = ("small", "occluded", "blurred", "stationary")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    scenarios: tuple[str, ...] = SCENARIO_TAGS

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")

    @classmethod
    def preset(cls, name: str) -> EvalConfig:
        return cls(iou_threshold=IOU_PRESETS[name])


@dataclass
class MatchResult:
    """``det_tp`` and ``det_gt`` follow input order; ``order`` is the
    processing (score-descending) order."""

    det_tp: np.ndarray
    det_gt: np.ndarray
    gt_matched: np.ndarray
    order: np.ndarray


def score_order(scores: Sequence[float]) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(
    dets: Sequence[Detection], gts: Sequence[Box | LabeledBox], iou_thr: float
) -> MatchResult:
    """Greedy matching of one class in one image.

    Each detection, best score first, takes the unmatched ground truth it
    overlaps most (lowest index on ties) if that IoU is ``>= iou_thr``.
    """
    gt_boxes = [g.box if isinstance(g, LabeledBox) else g for g in gts]
    order = score_order([d.score for d in dets])
    det_tp = np.zeros(len(dets), dtype=bool)
    det_gt = np.full(len(dets), -1, dtype=np.int64)
    gt_matched = np.zeros(len(gt_boxes), dtype=bool)
    if not dets or not gt_boxes:
        return MatchResult(det_tp, det_gt, gt_matched, order)
    overlaps = iou_matrix(boxes_to_array([d.box for d in dets]), boxes_to_array(gt_boxes))
    for i in order:
        cand = np.where(gt_matched, -1.0, overlaps[i])
        j = int(cand.argmax())
        if cand[j] >= iou_thr:
            det_tp[i] = True
            det_gt[i] = j
            gt_matched[j] = True
    return MatchResult(det_tp, det_gt, gt_matched, order)


def pr_curve(flags: Sequence[bool], num_gts: int) -> list[tuple[float, float]]:
    """Cumulative (recall, precision) after each detection.

    ``flags`` are TP markers already in score order. With no ground truth,
    recall is reported as 0 throughout.
    """
    if num_gts < 0:
        raise ValueError("num_gts must be >= 0")
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gts if num_gts else np.zeros(len(flags))
    precision = tp / np.maximum(tp + fp, 1)
    return [(float(r), float(p)) for r, p in zip(recall, precision)]


def average_precision(points: Sequence[tuple[float, float]]) -> float:
    if not points:
        return 0.0
    rec = np.concatenate([[0.0], [r for r, _ in points], [1.0]])
    prec = np.concatenate([[0.0], [p for _, p in points], [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.nonzero(rec[1:] != rec[:-1])[0]
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


@dataclass
class ClassResult:
    ap: float
    num_gts: int
    tp: int
    fp: int
    fn: int
    curve: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class EvalReport:
    iou_threshold: float
    per_class: dict[int, ClassResult]
    mean_ap: float
    per_scenario: dict[str, float]
    class_names: list[str] | None = None

    @property
    def per_class_ap(self) -> dict[int, float]:
        return {k: v.ap for k, v in self.per_class.items()}

    def class_name(self, k: int) -> str:
        if self.class_names and k < len(self.class_names):
            return self.class_names[k]
        return str(k)

    def to_dict(self, with_curves: bool = False) -> dict:
        out = {
            "iou_threshold": self.iou_threshold,
            "mAP": self.mean_ap,
            "per_class": {
                self.class_name(k): {
                    "ap": r.ap,
                    "num_gts": r.num_gts,
                    "tp": r.tp,
                    "fp": r.fp,
                    "fn": r.fn,
                    **({"curve": [list(p) for p in r.curve]} if with_curves else {}),
                }
                for k, r in sorted(self.per_class.items())
            },
            "per_scenario": dict(self.per_scenario),
        }
        return out

    def write(self, out_dir: str | Path) -> Path:
        """Write ``report.json``, ``per_class.csv`` and one PR-curve CSV per class."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out_dir / "per_class.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "ap", "num_gts", "tp", "fp", "fn"])
            for k, r in sorted(self.per_class.items()):
                w.writerow([self.class_name(k), f"{r.ap:.6f}", r.num_gts, r.tp, r.fp, r.fn])
            w.writerow(["mAP", f"{self.mean_ap:.6f}", "", "", "", ""])
        for k, r in sorted(self.per_class.items()):
            with open(out_dir / f"pr_{self.class_name(k)}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["recall", "precision"])
                w.writerows([[f"{a:.6f}", f"{b:.6f}"] for a, b in r.curve])
        return out_dir


def _class_result(
    dets_per_frame: Sequence[Sequence[Detection]],
    gts_per_frame: Sequence[Sequence[LabeledBox]],
    tags_per_frame: Sequence[Sequence[frozenset[str]]] | None,
    class_id: int,
    iou_thr: float,
    tag: str | None = None,
) -> ClassResult:
    scores: list[float] = []
    flags: list[bool] = []
    num_gts = 0
    for f, (dets, gts) in enumerate(zip(dets_per_frame, gts_per_frame)):
        cdets = [d for d in dets if d.class_id == class_id]
        gidx = [j for j, g in enumerate(gts) if g.class_id == class_id]
        in_stratum = [tag is None or tag in tags_per_frame[f][j] for j in gidx]
        num_gts += sum(in_stratum)
        m = match_detections(cdets, [gts[j] for j in gidx], iou_thr)
        for i in m.order:
            if m.det_tp[i]:
                if not in_stratum[m.det_gt[i]]:
                    # matched outside the stratum: neither TP nor FP here
                    continue
                flags.append(True)
            else:
                flags.append(False)
            scores.append(cdets[i].score)
    order = score_order(scores)
    ordered = [flags[i] for i in order]
    curve = pr_curve(ordered, num_gts)
    tp = int(sum(ordered))
    ap = average_precision(curve) if num_gts else 0.0
    return ClassResult(ap, num_gts, tp, len(ordered) - tp, num_gts - tp, curve)


def evaluate(
    dets_per_frame: Sequence[Sequence[Detection]],
    gts_per_frame: Sequence[Sequence[LabeledBox]],
    num_classes: int,
    config: EvalConfig | None = None,
    tags_per_frame: Sequence[Sequence[frozenset[str]]] | None = None,
    class_names: list[str] | None = None,
) -> EvalReport:
    """Pool detections over frames and score every class.

    ``tags_per_frame[f][j]`` are the scenario tags of ground truth ``j`` in
    frame ``f``; when given, each configured scenario gets its own mAP over
    the ground truths carrying that tag.
    """
    config = config or EvalConfig()
    if len(dets_per_frame) != len(gts_per_frame):
        raise ValueError("detections and ground truths cover different frame counts")
    for dets in dets_per_frame:
        for d in dets:
            if not 0 <= d.class_id < num_classes:
                raise ValueError(f"unknown detection class id {d.class_id}")
    for gts in gts_per_frame:
        for g in gts:
            if not 0 <= g.class_id < num_classes:
                raise ValueError(f"unknown ground-truth class id {g.class_id}")

    def mean_over_present(results: dict[int, ClassResult]) -> float:
        aps = [r.ap for r in results.values() if r.num_gts > 0]
        return float(np.mean(aps)) if aps else 0.0

    per_class = {
        k: _class_result(dets_per_frame, gts_per_frame, tags_per_frame, k, config.iou_threshold)
        for k in range(num_classes)
    }
    per_scenario: dict[str, float] = {}
    if tags_per_frame is not None:
        for tag in config.scenarios:
            res = {
                k: _class_result(dets_per_frame, gts_per_frame, tags_per_frame, k, config.iou_threshold, tag)
                for k in range(num_classes)
            }
            if any(r.num_gts for r in res.values()):
                per_scenario[tag] = mean_over_present(res)
    return EvalReport(config.iou_threshold, per_class, mean_over_present(per_class), per_scenario, class_names)
