import numpy as np
import pytest
import torch

from pairdet.detector import (
    CHECKPOINT_MAGIC,
    FINAL_CLS,
    ModelSpec,
    build_model,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
    transfer_weights,
)
from pairdet.geometry import AnchorConfig, iou_matrix
from pairdet.inputs import ModelInput, Variant

from helpers import gradient_check, small_scene, tiny_spec


def rand_input(variant, h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    return ModelInput(rng.random((h, w, Variant(variant).channels)).astype(np.float32), variant)


def test_first_layer_channels():
    for variant, c in (("baseline", 3), ("double", 6), ("flow", 6)):
        m = build_model(ModelSpec(variant=variant), 0)
        assert m.params["backbone.stage0.conv0.weight"].shape[1] == c
        assert m.spec.input_channels == c


def test_build_deterministic():
    a, b = build_model(ModelSpec(), 3), build_model(ModelSpec(), 3)
    assert all(torch.equal(a.params[k], b.params[k]) for k in a.params)
    c = build_model(ModelSpec(), 4)
    assert not torch.equal(a.params["backbone.stage0.conv0.weight"], c.params["backbone.stage0.conv0.weight"])


def test_initial_foreground_probability():
    m = build_model(ModelSpec(), 0)
    probs = torch.cat([c.reshape(-1) for c, _ in forward(m, rand_input("double"))])
    assert 0.005 <= float(probs.mean()) <= 0.02


def test_output_shapes_stride_arithmetic():
    spec = ModelSpec(
        variant="double",
        num_classes=3,
        anchor_config=AnchorConfig(pyramid_strides=(8,), scales=(1, 1.5, 2), aspect_ratios=(0.5, 1, 2), base_size=8),
        pyramid_levels=(8,),
    )
    (cls, reg), = forward(build_model(spec, 0), rand_input("double"))
    assert tuple(cls.shape) == (8, 8, 27)
    assert tuple(reg.shape) == (8, 8, 36)

    m = build_model(ModelSpec(), 0)
    for h, w in ((64, 64), (40, 72), (128, 96)):
        outs = forward(m, rand_input("double", h, w))
        for (c, r), s in zip(outs, (4, 8)):
            assert c.shape[:2] == r.shape[:2] == (h // s, w // s)


def test_zero_input_finite_and_channel_mismatch():
    m = build_model(ModelSpec(variant="baseline"), 0)
    outs = forward(m, ModelInput(np.zeros((32, 32, 3), np.float32), "baseline"))
    assert all(torch.isfinite(c).all() and torch.isfinite(r).all() for c, r in outs)
    with pytest.raises(ValueError):
        forward(m, rand_input("double", 32, 32))


def test_forward_deterministic():
    m = build_model(ModelSpec(), 1)
    x = rand_input("double")
    a, b = forward(m, x), forward(m, x)
    assert all(torch.equal(p[0], q[0]) and torch.equal(p[1], q[1]) for p, q in zip(a, b))


def test_end_to_end_gradient_small():
    spec = tiny_spec()
    assert build_model(spec).num_parameters() <= 5000
    for name, idx, ana, num in gradient_check(spec, small_scene(1), n_params=20, seed=1):
        # both sides are exactly or numerically zero for dead units
        assert abs(ana - num) <= 1e-3 * max(abs(ana), abs(num)) + 1e-9, (name, idx, ana, num)


def test_predict_thresholds():
    m = build_model(ModelSpec(), 0)
    x = rand_input("double")
    assert predict(m, x, score_thr=1.0) == []
    assert len(predict(m, x, score_thr=0.3)) <= 2


def test_predict_respects_max_dets_and_nms():
    m = build_model(ModelSpec(), 0)
    # push the class prior up so plenty of anchors clear the threshold
    m.params["cls_head.final.bias"] = torch.zeros_like(m.params["cls_head.final.bias"])
    dets = predict(m, rand_input("double"), score_thr=0.05, nms_thr=0.3, max_dets=15)
    assert 0 < len(dets) <= 15
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
    for k in {d.class_id for d in dets}:
        boxes = np.array([d.box.as_array() for d in dets if d.class_id == k])
        m_iou = iou_matrix(boxes, boxes)
        assert np.all(m_iou[np.triu_indices(len(boxes), 1)] <= 0.3)
    for d in dets:
        assert 0 <= d.box.x1 and d.box.x2 <= 64 and 0 <= d.box.y1 and d.box.y2 <= 64


def test_transfer_same_classes_copies_everything():
    src, dst = build_model(ModelSpec(), 1), build_model(ModelSpec(), 2)
    out = transfer_weights(src, dst)
    assert all(torch.equal(out.params[k], src.params[k]) for k in src.params)


def test_transfer_different_classes_skips_final_layer():
    src = build_model(ModelSpec(num_classes=5), 1)
    dst = build_model(ModelSpec(num_classes=3), 2)
    out = transfer_weights(src, dst)
    for k in out.params:
        want = dst if k in FINAL_CLS else src
        assert torch.equal(out.params[k], want.params[k]), k
    x = rand_input("double")
    reg_src = [r for _, r in forward(src, x)]
    reg_out = [r for _, r in forward(out, x)]
    assert all(torch.equal(a, b) for a, b in zip(reg_src, reg_out))


def test_transfer_rejects_other_differences():
    with pytest.raises(ValueError):
        transfer_weights(build_model(ModelSpec(variant="baseline")), build_model(ModelSpec(variant="double")))
    with pytest.raises(ValueError):
        transfer_weights(build_model(ModelSpec(feature_width=16)), build_model(ModelSpec()))


def test_checkpoint_roundtrip(tmp_path):
    m = build_model(ModelSpec(variant="flow", input_mean=(0.5,) * 6), 7)
    m.step = 42
    path = tmp_path / "m.pdet"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    assert raw.startswith(CHECKPOINT_MAGIC)
    back = load_checkpoint(path)
    assert back.spec == m.spec and back.step == 42
    assert all(torch.equal(back.params[k], m.params[k]) for k in m.params)
    save_checkpoint(back, tmp_path / "again.pdet")
    assert (tmp_path / "again.pdet").read_bytes() == raw


def test_checkpoint_corruption(tmp_path):
    m = build_model(ModelSpec(), 0)
    path = tmp_path / "m.pdet"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(ValueError):
        load_checkpoint(path)
    path.write_bytes(b"NOTIT\n" + raw[6:])
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(num_classes=0)
    with pytest.raises(ValueError):
        ModelSpec(pyramid_levels=(16,))
    with pytest.raises(ValueError):
        ModelSpec(variant="double", input_mean=(0.5,) * 3)
    d = ModelSpec().to_dict()
    assert ModelSpec.from_dict(d) == ModelSpec()
    d["input_channels"] = 3
    with pytest.raises(ValueError):
        ModelSpec.from_dict(d)
