"""Frame-wise spatial pathway: backbone (C3/C4/C5), PAFPN fusion (P3/P4/P5),
decoupled detection head, anchor-free decoding and per-frame NMS.

The backbone is a lightweight stack of strided SiLU conv blocks (stem stride 4,
then three stride-2 stages). Feature pyramids are plain lists of three
(C, H/s, W/s) arrays at strides 8, 16, 32.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Module, upsample2x, upsample2x_backward
from .tensor import ShapeError, Tensor, sigmoid

STRIDES = (8, 16, 32)


@dataclass
class Detection:
    """One decoded box in model-input pixel coordinates."""

    frame_index: int
    cx: float
    cy: float
    w: float
    h: float
    confidence: float
    class_id: int

    def to_json(self) -> dict:
        return {"frame": self.frame_index, "cx": self.cx, "cy": self.cy,
                "w": self.w, "h": self.h, "conf": self.confidence,
                "class": self.class_id}

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(d["frame"], d["cx"], d["cy"], d["w"], d["h"], d["conf"], d["class"])


class Backbone(Module):
    """Strided conv stack emitting C3/C4/C5 at strides 8/16/32."""

    def __init__(self, channels=32, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        c = channels
        self.stem1 = Conv2d(3, c // 2, 3, stride=2, rng=rng, dtype=dtype)
        self.stem2 = Conv2d(c // 2, c, 3, stride=2, rng=rng, dtype=dtype)
        self.stage3a = Conv2d(c, c, 3, stride=2, rng=rng, dtype=dtype)
        self.stage3b = Conv2d(c, c, 3, stride=1, rng=rng, dtype=dtype)
        self.stage4a = Conv2d(c, c, 3, stride=2, rng=rng, dtype=dtype)
        self.stage4b = Conv2d(c, c, 3, stride=1, rng=rng, dtype=dtype)
        self.stage5a = Conv2d(c, c, 3, stride=2, rng=rng, dtype=dtype)
        self.stage5b = Conv2d(c, c, 3, stride=1, rng=rng, dtype=dtype)

    def forward(self, x):
        if x.ndim != 3 or x.shape[0] != 3:
            raise ShapeError(f"backbone expects (3,H,W), got {x.shape}")
        if x.shape[1] % 32 or x.shape[2] % 32:
            raise ShapeError(f"input extents must be divisible by 32, got {x.shape[1:]}")
        h, c1 = self.stem1.forward(x)
        h, c2 = self.stem2.forward(h)
        h, c3a = self.stage3a.forward(h)
        c3, c3b = self.stage3b.forward(h)
        h, c4a = self.stage4a.forward(c3)
        c4, c4b = self.stage4b.forward(h)
        h, c5a = self.stage5a.forward(c4)
        c5, c5b = self.stage5b.forward(h)
        return [c3, c4, c5], (c1, c2, c3a, c3b, c4a, c4b, c5a, c5b)

    def backward(self, dlevels, ctx):
        c1, c2, c3a, c3b, c4a, c4b, c5a, c5b = ctx
        d3, d4, d5 = dlevels
        dh = self.stage5b.backward(d5, c5b)
        d4 = d4 + self.stage5a.backward(dh, c5a)
        dh = self.stage4b.backward(d4, c4b)
        d3 = d3 + self.stage4a.backward(dh, c4a)
        dh = self.stage3b.backward(d3, c3b)
        dh = self.stage3a.backward(dh, c3a)
        dh = self.stem2.backward(dh, c2)
        return self.stem1.backward(dh, c1)


class Pafpn(Module):
    """Top-down then bottom-up fusion over a 3-level pyramid."""

    def __init__(self, channels=32, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        c = channels
        self.td4 = Conv2d(2 * c, c, 3, rng=rng, dtype=dtype)
        self.td3 = Conv2d(2 * c, c, 3, rng=rng, dtype=dtype)
        self.down3 = Conv2d(c, c, 3, stride=2, rng=rng, dtype=dtype)
        self.bu4 = Conv2d(2 * c, c, 3, rng=rng, dtype=dtype)
        self.down4 = Conv2d(c, c, 3, stride=2, rng=rng, dtype=dtype)
        self.bu5 = Conv2d(2 * c, c, 3, rng=rng, dtype=dtype)

    def forward(self, levels):
        c3, c4, c5 = levels
        cc = c3.shape[0]
        u5 = upsample2x(c5)
        p4t, k4t = self.td4.forward(np.concatenate([c4, u5], axis=0))
        u4 = upsample2x(p4t)
        p3, k3 = self.td3.forward(np.concatenate([c3, u4], axis=0))
        d3, kd3 = self.down3.forward(p3)
        p4, k4 = self.bu4.forward(np.concatenate([p4t, d3], axis=0))
        d4, kd4 = self.down4.forward(p4)
        p5, k5 = self.bu5.forward(np.concatenate([c5, d4], axis=0))
        return [p3, p4, p5], (cc, k4t, k3, kd3, k4, kd4, k5)

    def backward(self, dlevels, ctx):
        cc, k4t, k3, kd3, k4, kd4, k5 = ctx
        dp3, dp4, dp5 = dlevels
        dcat5 = self.bu5.backward(dp5, k5)
        dc5 = dcat5[:cc]
        dp4 = dp4 + self.down4.backward(dcat5[cc:], kd4)
        dcat4 = self.bu4.backward(dp4, k4)
        dp4t = dcat4[:cc]
        dp3 = dp3 + self.down3.backward(dcat4[cc:], kd3)
        dcat3 = self.td3.backward(dp3, k3)
        dc3 = dcat3[:cc]
        dp4t = dp4t + upsample2x_backward(dcat3[cc:])
        dcat4t = self.td4.backward(dp4t, k4t)
        dc4 = dcat4t[:cc]
        dc5 = dc5 + upsample2x_backward(dcat4t[cc:])
        return [dc3, dc4, dc5]


class DecoupledHead(Module):
    """Per-level regression / objectness / class maps, parameters shared
    across levels."""

    def __init__(self, channels=32, num_classes=1, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        c = channels
        self.num_classes = num_classes
        self.stem = Conv2d(c, c, 1, rng=rng, dtype=dtype)
        self.cls_conv = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.cls_out = Conv2d(c, num_classes, 1, act=False, rng=rng, dtype=dtype)
        self.reg_conv = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.reg_out = Conv2d(c, 4, 1, act=False, rng=rng, dtype=dtype)
        self.obj_out = Conv2d(c, 1, 1, act=False, rng=rng, dtype=dtype)
        # prior-probability bias: start ~1% objectness/class everywhere so
        # early training is not dominated by a sea of false positives
        prior = -math.log((1.0 - 0.01) / 0.01)
        self.obj_out.b.value.fill(prior)
        self.cls_out.b.value.fill(prior)

    def forward_level(self, p):
        s, ks = self.stem.forward(p)
        hc, kc = self.cls_conv.forward(s)
        cls, kco = self.cls_out.forward(hc)
        hr, kr = self.reg_conv.forward(s)
        reg, kro = self.reg_out.forward(hr)
        obj, koo = self.obj_out.forward(hr)
        return {"reg": reg, "obj": obj, "cls": cls}, (ks, kc, kco, kr, kro, koo)

    def backward_level(self, dout, ctx):
        ks, kc, kco, kr, kro, koo = ctx
        dhr = self.reg_out.backward(dout["reg"], kro)
        dhr = dhr + self.obj_out.backward(dout["obj"], koo)
        ds = self.reg_conv.backward(dhr, kr)
        dhc = self.cls_out.backward(dout["cls"], kco)
        ds = ds + self.cls_conv.backward(dhc, kc)
        return self.stem.backward(ds, ks)

    def forward(self, levels):
        outs, ctxs = [], []
        for p in levels:
            o, c = self.forward_level(p)
            outs.append(o)
            ctxs.append(c)
        return outs, ctxs

    def backward(self, douts, ctxs):
        return [self.backward_level(d, c) for d, c in zip(douts, ctxs)]


# ---------------------------------------------------------------------------
# decoding

def confidence(obj_logit: float, cls_logit: float) -> float:
    """P(object) * P(class), both via sigmoid."""
    return float(sigmoid(np.asarray([obj_logit]))[0] * sigmoid(np.asarray([cls_logit]))[0])


def head_decode(outs, conf_floor: float, frame_index: int = 0,
                strides=STRIDES, max_dets: int | None = None) -> list[Detection]:
    """Decode per-cell maps into detections above the confidence floor.

    cx=(gx+dx)*s, cy=(gy+dy)*s, w=exp(dw)*s, h=exp(dh)*s; class = argmax of
    class logits; confidence = sigmoid(obj) * sigmoid(cls[argmax]). When
    max_dets is given, only the top candidates per frame are kept.
    """
    if not 0.0 <= conf_floor <= 1.0:
        raise ValueError("conf_floor must lie in [0,1]")
    dets = []
    for out, s in zip(outs, strides):
        reg, obj, cls = out["reg"], out["obj"], out["cls"]
        hh, ww = obj.shape[1], obj.shape[2]
        cls_id = cls.argmax(axis=0)
        cls_best = cls.max(axis=0)
        conf = sigmoid(obj[0].astype(np.float64)) * sigmoid(cls_best.astype(np.float64))
        ys, xs = np.nonzero(conf >= conf_floor)
        for gy, gx in zip(ys, xs):
            dets.append(Detection(
                frame_index=frame_index,
                cx=float((gx + reg[0, gy, gx]) * s),
                cy=float((gy + reg[1, gy, gx]) * s),
                w=float(math.exp(min(reg[2, gy, gx], 40.0)) * s),
                h=float(math.exp(min(reg[3, gy, gx], 40.0)) * s),
                confidence=float(conf[gy, gx]),
                class_id=int(cls_id[gy, gx]),
            ))
    if max_dets is not None and len(dets) > max_dets:
        dets.sort(key=lambda d: (-d.confidence, d.class_id, d.cy, d.cx))
        dets = dets[:max_dets]
    return dets


def box_iou(a: Detection, b: Detection) -> float:
    ax1, ax2 = a.cx - a.w / 2, a.cx + a.w / 2
    ay1, ay2 = a.cy - a.h / 2, a.cy + a.h / 2
    bx1, bx2 = b.cx - b.w / 2, b.cx + b.w / 2
    by1, by2 = b.cy - b.h / 2, b.cy + b.h / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def nms(dets: list[Detection], iou_threshold: float = 0.65) -> list[Detection]:
    """Greedy class-wise suppression by descending confidence.

    Ordering is made input-order independent by tie-breaking on class id and
    then box position.
    """
    order = sorted(dets, key=lambda d: (-d.confidence, d.class_id, d.cy, d.cx, d.w, d.h))
    keep: list[Detection] = []
    for d in order:
        if all(k.class_id != d.class_id or box_iou(k, d) < iou_threshold for k in keep):
            keep.append(d)
    return keep


# ---------------------------------------------------------------------------
# checkpoint I/O: JSON index + concatenated tensor blobs

_CKPT_MAGIC = b"ADCKPT01"


def save_checkpoint(path: str, params: dict, meta: dict | None = None):
    """Write a named-tensor table: magic, JSON index, then tensor blobs.

    The write is atomic (temp file + rename).
    """
    blobs, index, off = [], {}, 0
    for name in sorted(params):
        p = params[name]
        value = p.value if hasattr(p, "value") else np.asarray(p)
        blob = Tensor(value).to_blob()
        index[name] = {"offset": off, "shape": list(value.shape)}
        blobs.append(blob)
        off += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": index}).encode()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_CKPT_MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str):
    """Returns (tensors: name -> ndarray, meta dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    hlen = struct.unpack_from("<Q", raw, 8)[0]
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    tensors = {}
    for name, entry in header["tensors"].items():
        tensors[name] = Tensor.from_blob(raw[base + entry["offset"]:]).array
    return tensors, header.get("meta", {})
