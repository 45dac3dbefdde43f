import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from pairdet import cli
from pairdet.detector import FINAL_CLS, build_model, load_checkpoint
from pairdet.harness import training
from pairdet.harness.config import ExperimentConfig, TrainConfig, apply_overrides, parse_override
from pairdet.harness.experiments import compare_variants, fallback_experiment, offset_sweep, transfer_experiment
from pairdet.harness.training import InputBuilder, TrainingDiverged, input_mean_for, train
from pairdet.inputs import Variant
from pairdet.synthdata import DEFAULT_CLASSES, DatasetSpec, SceneSpec, generate_collection, save_collection

TINY = dict(
    backbone_widths=(4, 6, 8),
    feature_width=6,
    head_depth=0,
    convs_per_stage=1,
    anchor_scales=(1.0, 2.0),
    learning_rate=1e-3,
    log_every=0,
)


@pytest.fixture(scope="module")
def col():
    return generate_collection(DatasetSpec(SceneSpec(image_size=(64, 64), num_frames=6), 2, 1, seed=1))


def cfg(**kw):
    return TrainConfig(**{**TINY, "steps": 4, **kw})


def test_zero_steps_returns_initial_model(col):
    model, runlog = train(cfg(steps=0, seed=5), col)
    spec = cfg().model_spec(3, input_mean_for(Variant.DOUBLE, col.channel_means))
    init = build_model(spec, 5)
    assert model.step == 0 and runlog.losses == []
    assert all(torch.equal(model.params[k], init.params[k]) for k in init.params)


def test_deterministic_runs(col, tmp_path):
    a_model, a_log = train(cfg(steps=6, variant="flow", output_dir=str(tmp_path / "a")), col)
    b_model, b_log = train(cfg(steps=6, variant="flow", output_dir=str(tmp_path / "b")), col)
    assert (tmp_path / "a" / "model.pdet").read_bytes() == (tmp_path / "b" / "model.pdet").read_bytes()
    assert a_log.losses == b_log.losses and len(a_log.losses) == 6
    assert all(math.isfinite(r["total"]) for r in a_log.losses)
    ra = json.loads((tmp_path / "a" / "runlog.json").read_text())
    rb = json.loads((tmp_path / "b" / "runlog.json").read_text())
    ra["config"].pop("output_dir"), rb["config"].pop("output_dir")
    ra.pop("checkpoint"), rb.pop("checkpoint")
    assert ra == rb
    assert ra["config"]["learning_rate"] == 1e-3
    c_model, _ = train(cfg(steps=6, variant="flow", seed=1), col)
    assert not torch.equal(a_model.params["backbone.stage0.conv0.weight"], c_model.params["backbone.stage0.conv0.weight"])


def test_loss_goes_down(col):
    _, runlog = train(cfg(steps=60, variant="double"), col)
    first = np.mean([r["total"] for r in runlog.losses[:5]])
    last = np.mean([r["total"] for r in runlog.losses[-5:]])
    assert last < first


class RecordingFrames(list):
    def __init__(self, frames):
        super().__init__(frames)
        self.seen = []

    def __getitem__(self, i):
        self.seen.append(i)
        return super().__getitem__(i)


def test_never_reads_future_frames(col):
    seq = col.train[0]
    b = InputBuilder()
    for variant in Variant:
        for t in range(len(seq.frames)):
            frames = RecordingFrames(seq.frames)
            b.input_for(replace(seq, frames=frames), t, variant, 3)
            assert frames.seen and max(frames.seen) <= t


def test_divergence_is_reported(col, monkeypatch):
    real = training.detection_loss_terms

    def poisoned(*a, **kw):
        c, r = real(*a, **kw)
        return c * float("nan"), r

    monkeypatch.setattr(training, "detection_loss_terms", poisoned)
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(cfg(), col)


def test_eval_cadence(col):
    _, runlog = train(cfg(steps=4, eval_every=2), col)
    assert [e["step"] for e in runlog.evals] == [2, 4]
    assert "mAP" in runlog.evals[0]["report"]


def test_config_roundtrip_and_overrides(tmp_path):
    c = cfg(variant="baseline")
    assert TrainConfig.from_dict(c.to_dict()) == c
    path = tmp_path / "c.json"
    path.write_text(json.dumps(c.to_dict()))
    assert TrainConfig.from_file(path) == c
    assert parse_override("backbone_widths=[8,8,8]") == ("backbone_widths", (8, 8, 8))
    assert parse_override("variant=flow") == ("variant", "flow")
    c2 = apply_overrides(c, ["steps=10", "learning_rate=0.01"])
    assert (c2.steps, c2.learning_rate) == (10, 0.01)
    with pytest.raises(ValueError):
        apply_overrides(c, ["bogus=1"])
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(variant="triple")
    e = ExperimentConfig(train=c, seeds=(4,))
    assert ExperimentConfig.from_dict(e.to_dict()) == e


def test_compare_variants_report(col, tmp_path):
    rep = compare_variants(col, cfg(steps=2), seeds=(0,))
    assert [r["variant"] for r in rep.rows] == ["baseline", "double", "flow"]
    assert len(rep.configs) == 3 and {c["variant"] for c in rep.configs} == {"baseline", "double", "flow"}
    assert {c.name: c.asserted for c in rep.checks} == {"double_ge_baseline": True, "flow_vs_baseline": False}
    rep.write(tmp_path)
    assert (tmp_path / "table.csv").exists() and (tmp_path / "runs" / "double_seed0" / "pr_car.csv").exists()


def test_offset_sweep_report(col):
    rep = offset_sweep(col, cfg(steps=2), offsets=(1, 3), seeds=(0,))
    assert [r["offset"] for r in rep.rows] == [1, 3]
    assert [c["offset"] for c in rep.configs] == [1, 3]
    assert rep.checks[0].name == "offset_span_within_band"
    with pytest.raises(ValueError):
        offset_sweep(col, cfg(steps=2), offsets=(1, 6), seeds=(0,))


def test_transfer_report(col):
    src = generate_collection(
        DatasetSpec(SceneSpec(image_size=(64, 64), num_frames=6, classes=DEFAULT_CLASSES[:2]), 2, 1, seed=9)
    )
    rep = transfer_experiment(src, col, cfg(steps=4), seeds=(0,))
    checks = {c.name: c for c in rep.checks}
    assert checks["weights_copied_bit_exact"].passed
    assert [r["budget"] for r in rep.rows] == [1.0, 0.5]
    ft = [c for c in rep.configs if c["steps"] == 2]
    assert len(ft) == 1


def test_fallback_report(col):
    model, _ = train(cfg(steps=3), col)
    rep = fallback_experiment(model, col, cfg())
    assert rep.rows[0]["stratum"] == "all"
    assert set(rep.rows[0]) == {"stratum", "paired_map", "fallback_map", "delta"}
    assert rep.passed and not rep.checks[0].asserted


def test_cli_end_to_end(tmp_path, capsys):
    spec = tmp_path / "ds.json"
    spec.write_text(json.dumps({"scene": {"image_size": [64, 64], "num_frames": 6}, "train_scenes": 1, "test_scenes": 1}))
    data = tmp_path / "data"
    assert cli.main(["generate", str(spec), "--out", str(data)]) == 0
    conf = tmp_path / "train.json"
    conf.write_text(json.dumps(cfg(steps=3).to_dict()))
    run = tmp_path / "run"
    assert cli.main(["train", str(conf), "--dataset", str(data), "--out", str(run), "--set", "variant=baseline"]) == 0
    model = load_checkpoint(run / "model.pdet")
    assert model.spec.variant is Variant.BASELINE and model.step == 3
    assert cli.main(["evaluate", str(run / "model.pdet"), str(data), "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "report.json").exists()
    assert "mAP@0.5" in capsys.readouterr().out

    # a band nobody can meet makes the asserted check fail
    exp = tmp_path / "exp.json"
    exp.write_text(json.dumps({"train": cfg(steps=1).to_dict(), "seeds": [0], "offsets": [1, 2], "band": -1.0}))
    code = cli.main(["experiment", "offsets", str(exp), "--dataset", str(data), "--out", str(tmp_path / "off")])
    assert code == 1
    assert json.loads((tmp_path / "off" / "report.json").read_text())["passed"] is False
    assert cli.main(["train", "--dataset", str(data), "--out", str(run), "--set", "bogus=1"]) == 2


def test_single_scene_dataset_dir(tmp_path):
    col = generate_collection(DatasetSpec(SceneSpec(image_size=(64, 64), num_frames=4), 1, 0))
    save_collection(col, tmp_path / "c")
    model, _ = train(cfg(steps=2, dataset=str(tmp_path / "c" / col.train[0].name)))
    assert model.step == 2
    assert FINAL_CLS[0] in model.params


def test_lr_drop(col):
    _, const = train(cfg(steps=6), col)
    _, unity = train(cfg(steps=6, lr_drop_fraction=0.5, lr_drop_factor=1.0), col)
    _, dropped = train(cfg(steps=6, lr_drop_fraction=0.5, lr_drop_factor=0.1), col)
    assert unity.losses == const.losses
    # step 4 is the first update at the lower rate, so step 5 sees its effect
    assert dropped.losses[:4] == const.losses[:4]
    assert dropped.losses[4] != const.losses[4]
    with pytest.raises(ValueError):
        TrainConfig(lr_drop_fraction=1.5)
