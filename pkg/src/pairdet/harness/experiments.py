"""Experiment drivers: variant comparison, offset sweep, transfer, fallback.

Each driver returns an :class:`ExperimentReport` holding one table row per
compared setting, named pass/fail checks and the resolved config of every
run, and can write itself to a directory of CSV / JSON files.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..detector import FINAL_CLS, ModelState, build_model, transfer_weights
from ..evaluation import EvalConfig, EvalReport
from ..inputs import Variant
from ..synthdata import Collection
from .config import TrainConfig
from .training import InputBuilder, evaluate_model, input_mean_for, train

log = logging.getLogger(__name__)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    asserted: bool = True


@dataclass
class ExperimentReport:
    name: str
    rows: list[dict] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    configs: list[dict] = field(default_factory=list)
    evals: dict[str, EvalReport] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.asserted)

    def to_dict(self) -> dict:
        return {
            "experiment": self.name,
            "passed": self.passed,
            "rows": self.rows,
            "checks": [c.__dict__ for c in self.checks],
            "configs": self.configs,
        }

    def write(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        if self.rows:
            keys = list(self.rows[0])
            with open(out_dir / "table.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
                w.writeheader()
                for row in self.rows:
                    w.writerow({k: _fmt(row.get(k)) for k in keys})
        for run, report in self.evals.items():
            report.write(out_dir / "runs" / run)
        return out_dir


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return v


def _eval(model: ModelState, col: Collection, builder: InputBuilder, cfg: TrainConfig, fallback: bool = False) -> EvalReport:
    return evaluate_model(
        model, col.test, builder, cfg.offset, EvalConfig(cfg.eval_iou), fallback,
        cfg.score_thr, cfg.nms_thr, cfg.max_dets, col.class_names,
    )


def _stats(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std()) if len(arr) > 1 else 0.0


def compare_variants(
    collection: Collection,
    base: TrainConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    builder: InputBuilder | None = None,
    variants: tuple[str, ...] = ("baseline", "double", "flow"),
) -> ExperimentReport:
    """Train every variant from scratch per seed under one budget.

    Asserted: mean Double mAP >= mean baseline mAP. Flow vs baseline is
    reported only.
    """
    if not seeds:
        raise ValueError("at least one seed required")
    builder = builder or InputBuilder()
    report = ExperimentReport("variants")
    means = {}
    for variant in variants:
        maps = []
        for seed in seeds:
            cfg = replace(base, variant=variant, seed=seed)
            model, runlog = train(cfg, collection, builder)
            ev = _eval(model, collection, builder, cfg)
            report.evals[f"{variant}_seed{seed}"] = ev
            report.configs.append(runlog.config)
            maps.append(ev.mean_ap)
            log.info("variant %s seed %d mAP %.4f", variant, seed, ev.mean_ap)
        mean, spread = _stats(maps)
        means[variant] = mean
        report.rows.append({"variant": variant, "mean_map": mean, "std_map": spread, "per_seed": maps})
    if "double" in means and "baseline" in means:
        report.checks.append(
            Check(
                "double_ge_baseline",
                means["double"] >= means["baseline"],
                f"double {means['double']:.4f} vs baseline {means['baseline']:.4f}",
            )
        )
    if "flow" in means and "baseline" in means:
        report.checks.append(
            Check(
                "flow_vs_baseline",
                means["flow"] >= means["baseline"],
                f"flow {means['flow']:.4f} vs baseline {means['baseline']:.4f}",
                asserted=False,
            )
        )
    return report


def offset_sweep(
    collection: Collection,
    base: TrainConfig,
    offsets: tuple[int, ...] = (1, 3, 5),
    seeds: tuple[int, ...] = (0, 1, 2),
    band: float = 0.03,
    builder: InputBuilder | None = None,
) -> ExperimentReport:
    """Train Double at each preceding-frame offset; the spread of mean
    validation mAP across offsets must stay within ``band``."""
    shortest = min(len(s.frames) for s in collection.train + collection.test)
    if shortest <= max(offsets):
        raise ValueError(f"sequences of {shortest} frames are too short for offset {max(offsets)}")
    builder = builder or InputBuilder()
    report = ExperimentReport("offsets")
    means = []
    for offset in offsets:
        maps = []
        for seed in seeds:
            cfg = replace(base, variant="double", offset=offset, seed=seed)
            model, runlog = train(cfg, collection, builder)
            ev = _eval(model, collection, builder, cfg)
            report.evals[f"offset{offset}_seed{seed}"] = ev
            report.configs.append(runlog.config)
            maps.append(ev.mean_ap)
            log.info("offset %d seed %d mAP %.4f", offset, seed, ev.mean_ap)
        mean, spread = _stats(maps)
        means.append(mean)
        report.rows.append({"offset": offset, "mean_map": mean, "std_map": spread, "per_seed": maps})
    span = max(means) - min(means)
    report.checks.append(Check("offset_span_within_band", span <= band, f"span {span:.4f}, band {band:.4f}"))
    return report


def _non_final_equal(a: ModelState, b: ModelState) -> bool:
    return all(
        torch.equal(a.params[k], b.params[k]) for k in a.params if k not in FINAL_CLS
    )


def transfer_experiment(
    source: Collection,
    target: Collection,
    base: TrainConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    fraction: float = 0.5,
    ratio: float = 0.9,
    builder: InputBuilder | None = None,
) -> ExperimentReport:
    """From-scratch training on ``target`` at the full budget versus
    training on ``source``, transferring, and fine-tuning on ``target`` for
    ``fraction`` of the budget."""
    builder = builder or InputBuilder()
    report = ExperimentReport("transfer")
    scratch, transferred = [], []
    copy_ok = True
    for seed in seeds:
        cfg = replace(base, seed=seed)
        scratch_model, runlog = train(cfg, target, builder)
        report.configs.append(runlog.config)
        ev = _eval(scratch_model, target, builder, cfg)
        report.evals[f"scratch_seed{seed}"] = ev
        scratch.append(ev.mean_ap)

        src_model, src_log = train(cfg, source, builder)
        report.configs.append(src_log.config)
        variant = Variant(cfg.variant)
        fresh = build_model(cfg.model_spec(target.num_classes, input_mean_for(variant, target.channel_means)), seed)
        moved = transfer_weights(src_model, fresh)
        copy_ok &= _non_final_equal(moved, src_model)
        if src_model.spec.num_classes != fresh.spec.num_classes:
            copy_ok &= all(torch.equal(moved.params[k], fresh.params[k]) for k in FINAL_CLS)

        ft_cfg = replace(cfg, steps=int(round(cfg.steps * fraction)))
        if cfg.epochs is not None:
            ft_cfg = replace(ft_cfg, epochs=cfg.epochs * fraction)
        ft_model, ft_log = train(ft_cfg, target, builder, init_model=src_model)
        report.configs.append(ft_log.config)
        ev = _eval(ft_model, target, builder, ft_cfg)
        report.evals[f"transfer_seed{seed}"] = ev
        transferred.append(ev.mean_ap)
        log.info("transfer seed %d: scratch %.4f, transferred %.4f", seed, scratch[-1], transferred[-1])

    s_mean, s_std = _stats(scratch)
    t_mean, t_std = _stats(transferred)
    report.rows.append({"setting": "from_scratch", "budget": 1.0, "mean_map": s_mean, "std_map": s_std, "per_seed": scratch})
    report.rows.append({"setting": "transferred", "budget": fraction, "mean_map": t_mean, "std_map": t_std, "per_seed": transferred})
    report.checks.append(Check("weights_copied_bit_exact", copy_ok, "all non-final layers equal to source after transfer"))
    report.checks.append(
        Check(
            "transfer_reaches_ratio",
            t_mean >= ratio * s_mean,
            f"transferred {t_mean:.4f} vs {ratio:.2f} x scratch {s_mean:.4f}",
        )
    )
    return report


def fallback_experiment(
    model: ModelState, collection: Collection, base: TrainConfig, builder: InputBuilder | None = None
) -> ExperimentReport:
    """Evaluate a two-frame model on true pairs and on duplicated target
    frames. Nothing is asserted; deltas are reported overall and per stratum."""
    builder = builder or InputBuilder()
    report = ExperimentReport("fallback")
    paired = _eval(model, collection, builder, base)
    dup = _eval(model, collection, builder, base, fallback=True)
    report.evals["paired"] = paired
    report.evals["fallback"] = dup
    report.configs.append(base.to_dict())
    report.rows.append(
        {"stratum": "all", "paired_map": paired.mean_ap, "fallback_map": dup.mean_ap, "delta": dup.mean_ap - paired.mean_ap}
    )
    for tag in sorted(set(paired.per_scenario) | set(dup.per_scenario)):
        p = paired.per_scenario.get(tag, 0.0)
        d = dup.per_scenario.get(tag, 0.0)
        report.rows.append({"stratum": tag, "paired_map": p, "fallback_map": d, "delta": d - p})
    report.checks.append(
        Check("fallback_delta", True, f"delta {dup.mean_ap - paired.mean_ap:+.4f} (reported, not asserted)", asserted=False)
    )
    return report
