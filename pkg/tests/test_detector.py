import math

import numpy as np
import pytest

from angiodet.detector import (
    STRIDES,
    Backbone,
    DecoupledHead,
    Detection,
    Pafpn,
    box_iou,
    confidence,
    head_decode,
    load_checkpoint,
    nms,
    save_checkpoint,
)
from angiodet.tensor import Param, ShapeError, sigmoid


def make_outs(shapes=((8, 8), (4, 4), (2, 2)), num_classes=1, fill=-20.0):
    outs = []
    for hh, ww in shapes:
        outs.append({"reg": np.zeros((4, hh, ww), dtype=np.float32),
                     "obj": np.full((1, hh, ww), fill, dtype=np.float32),
                     "cls": np.full((num_classes, hh, ww), fill, dtype=np.float32)})
    return outs


# ---------------------------------------------------------------------------
# shapes and strides

def test_backbone_pyramid_shapes():
    bb = Backbone(channels=8)
    levels, _ = bb.forward(np.zeros((3, 64, 96), dtype=np.float32))
    assert [l.shape for l in levels] == [(8, 8, 12), (8, 4, 6), (8, 2, 3)]


def test_backbone_rejects_bad_input():
    bb = Backbone(channels=8)
    with pytest.raises(ShapeError):
        bb.forward(np.zeros((1, 64, 64), dtype=np.float32))
    with pytest.raises(ShapeError):
        bb.forward(np.zeros((3, 60, 64), dtype=np.float32))


def test_pafpn_preserves_shapes():
    fp = Pafpn(channels=8)
    levels = [np.random.default_rng(0).standard_normal((8, 8, 8)).astype(np.float32),
              np.random.default_rng(1).standard_normal((8, 4, 4)).astype(np.float32),
              np.random.default_rng(2).standard_normal((8, 2, 2)).astype(np.float32)]
    outs, _ = fp.forward(levels)
    assert [o.shape for o in outs] == [(8, 8, 8), (8, 4, 4), (8, 2, 2)]


def test_pafpn_top_down_and_bottom_up_paths_connect():
    """A bump in one level must reach the other levels through fusion."""
    rng = np.random.default_rng(3)
    fp = Pafpn(channels=8, rng=rng)
    levels = [rng.standard_normal((8, 8, 8)).astype(np.float32),
              rng.standard_normal((8, 4, 4)).astype(np.float32),
              rng.standard_normal((8, 2, 2)).astype(np.float32)]
    base, _ = fp.forward(levels)
    bumped = [lv.copy() for lv in levels]
    bumped[2] += 1.0  # coarsest -> finest via top-down
    outs, _ = fp.forward(bumped)
    assert np.abs(outs[0] - base[0]).max() > 0
    bumped = [lv.copy() for lv in levels]
    bumped[0] += 1.0  # finest -> coarsest via bottom-up
    outs, _ = fp.forward(bumped)
    assert np.abs(outs[2] - base[2]).max() > 0


def test_head_output_channels():
    head = DecoupledHead(channels=8, num_classes=3)
    outs, _ = head.forward([np.zeros((8, 4, 4), dtype=np.float32)])
    assert outs[0]["reg"].shape == (4, 4, 4)
    assert outs[0]["obj"].shape == (1, 4, 4)
    assert outs[0]["cls"].shape == (3, 4, 4)


# ---------------------------------------------------------------------------
# decoding

def test_decode_zero_offsets_land_on_cell_corners():
    outs = make_outs()
    outs[0]["obj"][0, 2, 3] = 10.0
    outs[0]["cls"][0, 2, 3] = 10.0
    dets = head_decode(outs, conf_floor=0.5)
    assert len(dets) == 1
    d = dets[0]
    assert (d.cx, d.cy) == (3 * 8.0, 2 * 8.0)
    assert d.w == pytest.approx(8.0) and d.h == pytest.approx(8.0)


def test_decode_formula_round_trip():
    """Encoding a box into offsets and decoding recovers it exactly."""
    cx, cy, w, h, s, gx, gy = 101.5, 57.25, 30.0, 22.0, 16, 6, 3
    outs = make_outs(shapes=((16, 16), (8, 8), (4, 4)))
    outs[1]["reg"][:, gy, gx] = [cx / s - gx, cy / s - gy,
                                 math.log(w / s), math.log(h / s)]
    outs[1]["obj"][0, gy, gx] = 5.0
    outs[1]["cls"][0, gy, gx] = 5.0
    d = head_decode(outs, conf_floor=0.5)[0]
    assert (d.cx, d.cy) == pytest.approx((cx, cy), abs=1e-4)
    assert (d.w, d.h) == pytest.approx((w, h), rel=1e-5)


def test_decode_respects_level_strides():
    for lvl, s in enumerate(STRIDES):
        outs = make_outs()
        outs[lvl]["obj"][0, 1, 1] = 10.0
        outs[lvl]["cls"][0, 1, 1] = 10.0
        d = head_decode(outs, conf_floor=0.5)[0]
        assert (d.cx, d.cy) == (float(s), float(s))


def test_decode_confidence_is_product_of_sigmoids():
    outs = make_outs()
    outs[0]["obj"][0, 0, 0] = 1.0
    outs[0]["cls"][0, 0, 0] = -1.0
    d = head_decode(outs, conf_floor=0.0)[0]
    want = float(sigmoid(np.array([1.0]))[0] * sigmoid(np.array([-1.0]))[0])
    assert d.confidence == pytest.approx(want, rel=1e-6)
    assert confidence(1.0, -1.0) == pytest.approx(want, rel=1e-6)


def test_decode_class_argmax():
    outs = make_outs(num_classes=3)
    outs[0]["obj"][0, 0, 0] = 10.0
    outs[0]["cls"][:, 0, 0] = [0.0, 4.0, 2.0]
    d = head_decode(outs, conf_floor=0.5)[0]
    assert d.class_id == 1


def test_decode_floor_filters():
    outs = make_outs()
    outs[0]["obj"][0, 0, 0] = 10.0
    outs[0]["cls"][0, 0, 0] = 10.0   # conf ~ 1
    outs[0]["obj"][0, 1, 1] = -3.0
    outs[0]["cls"][0, 1, 1] = -3.0   # conf ~ 0.0022
    assert len(head_decode(outs, conf_floor=0.01)) == 1
    assert len(head_decode(outs, conf_floor=0.001)) == 2


def test_decode_max_dets_keeps_top_confidence():
    outs = make_outs()
    for i, logit in enumerate((3.0, 2.0, 1.0)):
        outs[0]["obj"][0, 0, i] = logit
        outs[0]["cls"][0, 0, i] = logit
    dets = head_decode(outs, conf_floor=0.0, max_dets=2)
    assert len(dets) == 2
    assert dets[0].confidence >= dets[1].confidence
    assert {d.cx for d in dets} == {0.0, 8.0}


def test_decode_rejects_bad_floor():
    with pytest.raises(ValueError):
        head_decode(make_outs(), conf_floor=1.5)


# ---------------------------------------------------------------------------
# IoU / NMS

def det(cx, cy, w=10.0, h=10.0, conf=0.9, cls=0, frame=0):
    return Detection(frame, cx, cy, w, h, conf, cls)


def test_iou_identical_boxes():
    assert box_iou(det(5, 5), det(5, 5)) == pytest.approx(1.0)


def test_iou_disjoint_boxes():
    assert box_iou(det(0, 0), det(100, 100)) == 0.0


def test_iou_half_overlap():
    # 10x10 boxes offset by 5 in x: inter 50, union 150
    assert box_iou(det(0, 0), det(5, 0)) == pytest.approx(1 / 3)


def test_nms_suppresses_duplicates():
    kept = nms([det(0, 0, conf=0.9), det(1, 0, conf=0.8)], iou_threshold=0.65)
    assert len(kept) == 1
    assert kept[0].confidence == 0.9


def test_nms_keeps_distant_boxes():
    kept = nms([det(0, 0, conf=0.9), det(50, 50, conf=0.8)], iou_threshold=0.65)
    assert len(kept) == 2


def test_nms_is_classwise():
    kept = nms([det(0, 0, conf=0.9, cls=0), det(0, 0, conf=0.8, cls=1)])
    assert len(kept) == 2


def test_nms_threshold_boundary():
    # IoU exactly at the threshold suppresses (strict < keeps)
    a, b = det(0, 0, conf=0.9), det(5, 0, conf=0.8)
    iou = box_iou(a, b)
    assert len(nms([a, b], iou_threshold=iou)) == 1
    assert len(nms([a, b], iou_threshold=iou + 1e-9)) == 2


def test_nms_order_independent():
    rng = np.random.default_rng(8)
    dets = [det(float(rng.integers(0, 40)), float(rng.integers(0, 40)),
                conf=float(rng.integers(1, 10)) / 10) for _ in range(12)]
    kept = nms(dets)
    cans = sorted((d.cx, d.cy, d.confidence) for d in kept)
    for _ in range(5):
        perm = [dets[i] for i in rng.permutation(len(dets))]
        assert sorted((d.cx, d.cy, d.confidence) for d in nms(perm)) == cans


# ---------------------------------------------------------------------------
# serialization

def test_detection_json_round_trip():
    d = det(1.5, 2.5, 3.0, 4.0, 0.75, 2, frame=7)
    assert Detection.from_json(d.to_json()) == d


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    params = {"a.w": Param(rng.standard_normal((3, 4)).astype(np.float32)),
              "b.b": Param(rng.standard_normal(5).astype(np.float32))}
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, params, meta={"variant": "occlunet1"})
    tensors, meta = load_checkpoint(path)
    assert meta["variant"] == "occlunet1"
    assert set(tensors) == {"a.w", "b.b"}
    for name in tensors:
        assert np.array_equal(tensors[name], params[name].value)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(ValueError):
        load_checkpoint(str(p))


def test_head_starts_quiet():
    """Fresh heads should predict (almost) nothing above the decode floor."""
    head = DecoupledHead(channels=8, num_classes=1, rng=np.random.default_rng(10))
    x = np.random.default_rng(11).standard_normal((8, 8, 8)).astype(np.float32)
    outs, _ = head.forward([x])
    dets = head_decode([outs[0]], conf_floor=0.01, strides=(8,))
    assert len(dets) < 8
