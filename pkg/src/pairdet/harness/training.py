"""Training loop and model evaluation over annotated sequences."""

from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..detector import (
    ModelState,
    build_model,
    flatten_outputs,
    forward_tensor,
    input_tensor,
    load_checkpoint,
    model_anchors,
    predict,
    save_checkpoint,
    transfer_weights,
)
from ..evaluation import EvalConfig, EvalReport, evaluate
from ..flow import ZERO_MOTION, FlowParams, farneback_flow, flow_image
from ..geometry import Assignment, assign_anchors
from ..inputs import (
    FramePair,
    ModelInput,
    Variant,
    duplicate_fallback,
    select_preceding,
)
from ..losses import FocalParams, detection_loss_terms
from ..synthdata import AnnotatedSequence, Collection, load_collection
from .config import TrainConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class InputBuilder:
    """Builds model inputs for a variant, caching flow images.

    Flow images are keyed by (sequence name, preceding index, target index),
    so one builder can be shared across runs on the same data.
    """

    def __init__(self, flow_params: FlowParams | None = None):
        self.flow_params = flow_params or FlowParams()
        self._flow: dict[tuple[str, int, int], np.ndarray] = {}

    def pair(self, seq: AnnotatedSequence, t: int, offset: int, fallback: bool = False) -> FramePair:
        if fallback:
            return duplicate_fallback(seq.frames[t])
        return select_preceding(seq.frames, t, offset)

    def build(self, seq: AnnotatedSequence, pair: FramePair, variant: Variant) -> ModelInput:
        if variant is Variant.BASELINE:
            return ModelInput(pair.target.pixels, variant)
        if variant is Variant.DOUBLE:
            return ModelInput(np.concatenate([pair.preceding.pixels, pair.target.pixels], axis=-1), variant)
        if pair.offset == 0:
            flow = np.full(pair.target.pixels.shape, ZERO_MOTION, dtype=np.float32)
        else:
            key = (seq.name, pair.preceding.time_index, pair.target.time_index)
            flow = self._flow.get(key)
            if flow is None:
                field_ = farneback_flow(pair.preceding.pixels, pair.target.pixels, self.flow_params)
                flow = flow_image(field_).astype(np.float32)
                self._flow[key] = flow
        return ModelInput(np.concatenate([flow, pair.target.pixels], axis=-1), variant)

    def input_for(
        self, seq: AnnotatedSequence, t: int, variant: Variant, offset: int, fallback: bool = False
    ) -> ModelInput:
        return self.build(seq, self.pair(seq, t, offset, fallback), variant)


def input_mean_for(variant: Variant, channel_means: Sequence[float]) -> tuple[float, ...]:
    image = tuple(float(m) for m in channel_means)
    if variant is Variant.BASELINE:
        return image
    if variant is Variant.DOUBLE:
        return image + image
    return (ZERO_MOTION,) * 3 + image


@dataclass
class RunLog:
    config: dict
    losses: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Deterministic content; wall-clock timings are kept apart."""
        return {"config": self.config, "losses": self.losses, "evals": self.evals, "checkpoint": self.checkpoint}

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "runlog.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        (out_dir / "timings.json").write_text(json.dumps(self.timings, indent=1))


def focal_params_for(config: TrainConfig, collection: Collection) -> FocalParams:
    if config.alpha_mode == "uniform":
        return FocalParams.uniform(collection.num_classes, config.gamma)
    return FocalParams.from_class_counts(collection.class_counts("train"), config.gamma)


def evaluate_model(
    model: ModelState,
    sequences: Sequence[AnnotatedSequence],
    builder: InputBuilder,
    offset: int,
    eval_config: EvalConfig | None = None,
    fallback: bool = False,
    score_thr: float = 0.05,
    nms_thr: float = 0.5,
    max_dets: int = 100,
    class_names: list[str] | None = None,
) -> EvalReport:
    dets, gts, tags = [], [], []
    for seq in sequences:
        for t in range(len(seq.frames)):
            inp = builder.input_for(seq, t, model.spec.variant, offset, fallback)
            dets.append(predict(model, inp, score_thr, nms_thr, max_dets))
            gts.append(seq.ground_truths(t))
            tags.append([a.tags for a in seq.annotations[t]])
    return evaluate(dets, gts, model.spec.num_classes, eval_config, tags, class_names)


def _schedule(config: TrainConfig, num_items: int) -> int:
    if config.epochs is not None:
        return int(round(config.epochs * num_items))
    return config.steps


def train(
    config: TrainConfig,
    collection: Collection | None = None,
    builder: InputBuilder | None = None,
    init_model: ModelState | None = None,
) -> tuple[ModelState, RunLog]:
    """Train one model with Adam on single pairs.

    The iteration order is a fresh seeded permutation of all (sequence,
    frame) items per epoch, so runs sharing a seed and dataset see the same
    data order regardless of variant. When ``init_model`` (or
    ``config.init_checkpoint``) is given, its weights are transferred into
    the fresh model before training. The learning rate is constant unless
    ``config.lr_drop_fraction`` is below 1, in which case it is scaled once
    by ``config.lr_drop_factor`` after that fraction of the steps.
    """
    torch.set_num_threads(config.threads)
    torch.use_deterministic_algorithms(True)
    t_start = time.perf_counter()
    if collection is None:
        collection = load_collection(config.dataset)
    builder = builder or InputBuilder()
    variant = Variant(config.variant)
    spec = config.model_spec(collection.num_classes, input_mean_for(variant, collection.channel_means))
    model = build_model(spec, config.seed)
    if init_model is None and config.init_checkpoint:
        init_model = load_checkpoint(config.init_checkpoint)
    if init_model is not None:
        model = transfer_weights(init_model, model)
    params = {k: v.clone().requires_grad_(True) for k, v in model.params.items()}
    names = sorted(params)
    optimizer = torch.optim.Adam(
        [params[k] for k in names], lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.eps
    )
    focal = focal_params_for(config, collection)

    items = [(s, t) for s in range(len(collection.train)) for t in range(len(collection.train[s].frames))]
    if not items:
        raise ValueError("training split is empty")
    h, w = collection.train[0].frames[0].pixels.shape[:2]
    anchors = model_anchors(spec, h, w)
    assignments: dict[tuple[int, int], Assignment] = {}
    runlog = RunLog(config=config.to_dict())
    total_steps = _schedule(config, len(items))
    rng = np.random.default_rng(config.seed)
    t_prep = time.perf_counter()

    drop_after = int(round(config.lr_drop_fraction * total_steps))
    order: list[int] = []
    for step in range(1, total_steps + 1):
        if step == drop_after + 1 and drop_after < total_steps:
            for group in optimizer.param_groups:
                group["lr"] = config.learning_rate * config.lr_drop_factor
        if not order:
            order = list(rng.permutation(len(items)))
        s, t = items[order.pop(0)]
        seq = collection.train[s]
        if (s, t) not in assignments:
            assignments[(s, t)] = assign_anchors(anchors, seq.ground_truths(t), config.pos_iou, config.neg_iou)
        inp = builder.input_for(seq, t, variant, config.offset)
        x = input_tensor(spec, inp)
        logits, deltas = flatten_outputs(spec, forward_tensor(spec, params, x))
        cls_loss, reg_loss = detection_loss_terms(torch.sigmoid(logits), deltas, assignments[(s, t)], focal)
        loss = cls_loss + config.reg_weight * reg_loss
        values = (cls_loss.item(), reg_loss.item(), loss.item())
        if not all(math.isfinite(v) for v in values):
            raise TrainingDiverged(
                f"non-finite loss at step {step} (sequence {seq.name}, frame {t}): "
                f"classification={values[0]}, regression={values[1]}"
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        runlog.losses.append({"step": step, "classification": values[0], "regression": values[1], "total": values[2]})
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.4f (cls %.4f reg %.4f)", step, values[2], values[0], values[1])
        if config.eval_every and step % config.eval_every == 0 and collection.test:
            snapshot = ModelState(spec, {k: v.detach().clone() for k, v in params.items()}, model.step + step)
            report = evaluate_model(
                snapshot, collection.test, builder, config.offset, EvalConfig(config.eval_iou),
                score_thr=config.score_thr, nms_thr=config.nms_thr, max_dets=config.max_dets,
                class_names=collection.class_names,
            )
            runlog.evals.append({"step": step, "report": report.to_dict()})

    final = ModelState(spec, {k: v.detach().clone() for k, v in params.items()}, model.step + total_steps)
    runlog.timings = {"prepare_s": t_prep - t_start, "train_s": time.perf_counter() - t_prep}
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(final, out / "model.pdet")
        runlog.checkpoint = str(out / "model.pdet")
        runlog.write(out)
    return final, runlog
