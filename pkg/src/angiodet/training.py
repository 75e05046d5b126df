"""Desk-scale optimization: simplified detection loss, center-based target
assignment, Nesterov SGD with decoupled weight decay, and the two-phase
learning-rate schedule (quadratic warmup, cosine annealing to 0.1% of base,
fixed tail)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detector import STRIDES
from .tensor import bce_with_logits


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class OptimizerConfig:
    momentum: float = 0.9
    base_lr: float = 0.005
    weight_decay: float = 5e-4
    batch_train: int = 4
    batch_val: int = 1
    epochs: int = 20
    warmup_epochs: float = 2.0
    final_epochs: float = 2.0
    min_lr_factor: float = 1e-3
    clip_norm: float = 10.0

    def __post_init__(self):
        for name in ("momentum", "base_lr", "weight_decay", "batch_train",
                     "batch_val", "epochs", "warmup_epochs", "final_epochs",
                     "min_lr_factor", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def lr_at(progress: float, cfg: OptimizerConfig) -> float:
    """Learning rate at a fractional epoch position.

    Warmup [0, warmup): base*(e/warmup)^2. Anneal [warmup, epochs-final):
    cosine from base down to min = min_lr_factor*base. Final tail: min.
    """
    if not 0.0 <= progress <= cfg.epochs:
        raise ValueError(f"progress {progress} outside [0, {cfg.epochs}]")
    lo = cfg.min_lr_factor * cfg.base_lr
    anneal_end = cfg.epochs - cfg.final_epochs
    if progress < cfg.warmup_epochs:
        return cfg.base_lr * (progress / cfg.warmup_epochs) ** 2
    if progress < anneal_end:
        span = anneal_end - cfg.warmup_epochs
        cos = math.cos(math.pi * (progress - cfg.warmup_epochs) / span)
        return lo + (cfg.base_lr - lo) * 0.5 * (1.0 + cos)
    return lo


# ---------------------------------------------------------------------------
# target assignment

@dataclass
class Targets:
    level: int
    cells: list  # (gy, gx) positives at the chosen level
    box: tuple   # gt (cx, cy, w, h) in model-input pixels
    class_id: int


def assign_targets(gt_box, class_id: int, level_shapes, strides=STRIDES) -> Targets:
    """Positive cells: the gt-center cell plus its in-bounds 8-neighborhood at
    the level whose stride best matches the box extent."""
    cx, cy, w, h = gt_box
    size = math.sqrt(w * h)
    level = min(range(len(strides)),
                key=lambda i: abs(math.log2(size / (4 * strides[i]))))
    hh, ww = level_shapes[level]
    s = strides[level]
    gx, gy = int(cx // s), int(cy // s)
    if not (0 <= gx < ww and 0 <= gy < hh):
        raise ValueError(f"gt center ({cx},{cy}) outside the image grid")
    cells = [(gy + dy, gx + dx)
             for dy in (-1, 0, 1) for dx in (-1, 0, 1)
             if 0 <= gy + dy < hh and 0 <= gx + dx < ww]
    return Targets(level, cells, (cx, cy, w, h), class_id)


# ---------------------------------------------------------------------------
# loss

def _iou_loss_grad(reg, gy, gx, stride, gt):
    """1 - IoU between the decoded cell box and gt, with d/d(dx,dy,dw,dh)."""
    dx, dy, dw, dh = (float(reg[i, gy, gx]) for i in range(4))
    dw, dh = min(dw, 20.0), min(dh, 20.0)
    cx, cy = (gx + dx) * stride, (gy + dy) * stride
    w, h = stride * math.exp(dw), stride * math.exp(dh)
    gcx, gcy, gw, gh = gt
    l1, r1, t1, b1 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    l2, r2, t2, b2 = gcx - gw / 2, gcx + gw / 2, gcy - gh / 2, gcy + gh / 2
    iw = min(r1, r2) - max(l1, l2)
    ih = min(b1, b2) - max(t1, t2)
    if iw <= 0 or ih <= 0:
        # no overlap: IoU gradient vanishes; pull the center instead so the
        # positive cell is never gradient-dead
        dist2 = (cx - gcx) ** 2 + (cy - gcy) ** 2
        norm = gw * gh
        g = np.array([2 * (cx - gcx) * stride, 2 * (cy - gcy) * stride, 0.0, 0.0]) / norm
        return 1.0 + dist2 / norm, g
    inter = iw * ih
    s_areas = w * h + gw * gh
    union = s_areas - inter
    iou = inter / union
    # d iou / d inter at fixed areas, d iou / d area1 at fixed inter
    d_inter = s_areas / union ** 2
    d_area1 = -inter / union ** 2
    # intersection edge derivatives w.r.t. pred box edges
    diw_dl1 = -1.0 if l1 > l2 else 0.0
    diw_dr1 = 1.0 if r1 < r2 else 0.0
    dih_dt1 = -1.0 if t1 > t2 else 0.0
    dih_db1 = 1.0 if b1 < b2 else 0.0
    d_inter_dcx = ih * (diw_dl1 + diw_dr1)
    d_inter_dcy = iw * (dih_dt1 + dih_db1)
    d_inter_dwp = ih * (-0.5 * diw_dl1 + 0.5 * diw_dr1)
    d_inter_dhp = iw * (-0.5 * dih_dt1 + 0.5 * dih_db1)
    diou_dcx = d_inter * d_inter_dcx
    diou_dcy = d_inter * d_inter_dcy
    diou_dwp = d_inter * d_inter_dwp + d_area1 * h
    diou_dhp = d_inter * d_inter_dhp + d_area1 * w
    # chain to reg channels: cx=(gx+dx)s, w = s*exp(dw)
    g = -np.array([diou_dcx * stride, diou_dcy * stride,
                   diou_dwp * w, diou_dhp * h])
    return 1.0 - iou, g


def detection_loss(outs, target: Targets | None, strides=STRIDES):
    """IoU loss on positives + objectness BCE over all cells + class BCE on
    positives, summed and normalized by the positive count (>= 1).

    Returns (loss, per-level gradient dicts matching the head output maps).
    """
    douts = [{k: np.zeros_like(v) for k, v in out.items()} for out in outs]
    pos = {}
    if target is not None:
        pos = {(target.level, gy, gx) for gy, gx in target.cells}
    npos = max(1, len(pos))
    loss = 0.0
    for lvl, (out, s) in enumerate(zip(outs, strides)):
        obj_t = np.zeros_like(out["obj"])
        for (l, gy, gx) in pos:
            if l == lvl:
                obj_t[0, gy, gx] = 1.0
        l_obj, g_obj = bce_with_logits(out["obj"], obj_t)
        loss += float(l_obj.sum())
        douts[lvl]["obj"] = g_obj / npos
        if target is not None and target.level == lvl:
            k = out["cls"].shape[0]
            cls_t = np.zeros(k)
            cls_t[target.class_id] = 1.0
            for gy, gx in target.cells:
                l_cls, g_cls = bce_with_logits(out["cls"][:, gy, gx], cls_t)
                loss += float(l_cls.sum())
                douts[lvl]["cls"][:, gy, gx] += g_cls / npos
                l_iou, g_iou = _iou_loss_grad(out["reg"], gy, gx, s, target.box)
                loss += l_iou
                douts[lvl]["reg"][:, gy, gx] += g_iou / npos
    return loss / npos, douts


# ---------------------------------------------------------------------------
# optimizer

class SgdNesterov:
    """SGD with Nesterov momentum and decoupled weight decay."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 5e-4,
                 clip_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(p.value) for name, p in params.items()}

    def step(self, lr: float):
        m = self.momentum
        if self.clip_norm > 0.0:
            total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                  for p in self.params.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                for p in self.params.values():
                    p.grad *= scale
        for name, p in self.params.items():
            g = p.grad
            v = self.velocity[name]
            v *= m
            v += g
            if lr == 0.0:
                continue
            p.value *= 1.0 - lr * self.weight_decay
            p.value -= (lr * (g + m * v)).astype(p.value.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# training loop

def _window_frames(seq, t, size):
    from .data import window as frame_window
    idx = frame_window(seq.frames.shape[0], t, size)
    return [np.ascontiguousarray(np.broadcast_to(seq.frames[i], (3,) + seq.frames[i].shape))
            for i in idx]


def _sample_center_frames(seq, rng, k):
    """Pick k window centers: inside the visibility interval for annotated
    sequences, anywhere otherwise."""
    n = seq.frames.shape[0]
    if seq.annotation is not None:
        lo = min(seq.annotation.frame_first, n - 1)
        hi = min(seq.annotation.frame_last, n - 1)
        return [int(rng.integers(lo, hi + 1)) for _ in range(k)]
    return [int(rng.integers(0, n)) for _ in range(k)]


def train(train_seqs, val_seqs, model_cfg, opt_cfg: OptimizerConfig,
          pipe_cfg, seed: int = 0, windows_per_seq: int = 2,
          minip_mode: bool = False, log_fn=None, val_jobs: int = 1):
    """Train a model; returns (model with best-validation-recall weights, log).

    Deterministic for a given seed. Validation precision/recall are computed
    at the sequence level through the full post-processing pipeline after
    every epoch; the best-by-recall parameter snapshot is restored at the end.
    """
    from .model import OcclusionNet
    from .pipeline import evaluate_model, preprocess

    rng = np.random.default_rng(seed)
    model = OcclusionNet(model_cfg, rng=rng)
    params = dict(model.named_params())
    opt = SgdNesterov(params, opt_cfg.momentum, opt_cfg.weight_decay,
                      clip_norm=opt_cfg.clip_norm)
    log = []

    def emit(entry):
        log.append(entry)
        if log_fn:
            log_fn(entry)

    # preprocess once: sequences are small at desk scale
    pre_train = [preprocess(s, pipe_cfg) for s in train_seqs]
    best = (-1.0, -1.0)
    best_state = None
    for epoch in range(opt_cfg.epochs):
        samples = []
        for seq in pre_train:
            if minip_mode:
                samples.append((seq, None))
            else:
                for t in _sample_center_frames(seq, rng, windows_per_seq):
                    samples.append((seq, t))
        order = rng.permutation(len(samples))
        steps = max(1, len(samples) // opt_cfg.batch_train)
        for step in range(steps):
            batch = [samples[i] for i in
                     order[step * opt_cfg.batch_train:(step + 1) * opt_cfg.batch_train]]
            lr = lr_at(epoch + step / steps, opt_cfg)
            opt.zero_grad()
            batch_loss = 0.0
            for seq, t in batch:
                if minip_mode:
                    from .data import minip as minip_op
                    img = np.ascontiguousarray(
                        np.broadcast_to(minip_op(seq), (3,) + seq.frames.shape[1:]))
                    frames = [img] * model_cfg.window
                else:
                    frames = _window_frames(seq, t, model_cfg.window)
                outs, ctx = model.forward(frames)
                target = None
                ann = seq.annotation
                if ann is not None:
                    shapes = [o["obj"].shape[1:] for o in outs]
                    target = assign_targets((ann.cx, ann.cy, ann.box, ann.box),
                                            ann.class_id, shapes)
                loss, douts = detection_loss(outs, target)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}")
                batch_loss += loss
                inv = 1.0 / len(batch)
                for d in douts:
                    for k in d:
                        d[k] *= inv
                model.backward(douts, ctx)
            opt.step(lr)
            emit({"epoch": epoch, "step": step, "lr": lr,
                  "loss": batch_loss / len(batch)})
        _, report = evaluate_model(model, val_seqs, pipe_cfg,
                                   minip_mode=minip_mode, jobs=val_jobs)
        vp, vr = report.overall.precision, report.overall.recall
        emit({"epoch": epoch, "val_precision": vp, "val_recall": vr})
        if (vr, vp) > best:
            best = (vr, vp)
            best_state = {n: p.value.copy() for n, p in params.items()}
    if best_state is not None:
        for n, p in params.items():
            p.value[...] = best_state[n]
    return model, log
