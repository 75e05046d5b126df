"""End-to-end glue: preprocessing into model inputs, per-sequence inference
for the temporal variants and the MinIP single-frame baseline, trajectory
post-processing, and sequence-level evaluation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import DsaSequence, minip, normalize, resize_bicubic, window
from .detector import head_decode, nms
from .evaluation import JudgeConfig, aggregate, judge_sequence
from .trajectory import LinkConfig, group_by_frame, link, select_best

MINIP_BASELINE = "minip-baseline"


@dataclass
class PipelineConfig:
    model_input: int = 640
    normalize_method: str = "minmax"
    decode_floor: float = 0.01
    nms_iou: float = 0.65
    max_dets_per_frame: int = 50
    link: LinkConfig = None  # type: ignore[assignment]
    judge: JudgeConfig = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.link is None:
            self.link = LinkConfig()
        if self.judge is None:
            self.judge = JudgeConfig()


def preprocess(seq: DsaSequence, cfg: PipelineConfig) -> DsaSequence:
    """Normalize and, when needed, resize to the model input size."""
    seq = normalize(seq, cfg.normalize_method)
    t, h, w = seq.frames.shape
    if h != cfg.model_input or w != cfg.model_input:
        seq, _ = resize_bicubic(seq, cfg.model_input)
    return seq


def _as_rgb(frame: np.ndarray) -> np.ndarray:
    return np.broadcast_to(frame, (3,) + frame.shape)


def infer_sequence(model, seq: DsaSequence, cfg: PipelineConfig,
                   minip_mode: bool = False) -> list:
    """Per-frame detections (after NMS) for one preprocessed sequence."""
    t_frames = seq.frames.shape[0]
    dets = []
    if minip_mode:
        pyr = model.frame_pyramid(_as_rgb(minip(seq)))
        outs = model.head_on_window([pyr] * model.cfg.window)
        dets.extend(nms(head_decode(outs, cfg.decode_floor, 0,
                                    max_dets=cfg.max_dets_per_frame), cfg.nms_iou))
        return dets
    pyramids = [model.frame_pyramid(_as_rgb(f)) for f in seq.frames]
    for t in range(t_frames):
        idx = window(t_frames, t, model.cfg.window)
        outs = model.head_on_window([pyramids[i] for i in idx])
        dets.extend(nms(head_decode(outs, cfg.decode_floor, t,
                                    max_dets=cfg.max_dets_per_frame), cfg.nms_iou))
    return dets


def postprocess(dets: list, cfg: PipelineConfig):
    """Link, score and select the single best trajectory (or None)."""
    return select_best(link(group_by_frame(dets), cfg.link))


def gt_for_judging(seq: DsaSequence) -> dict | None:
    """Ground-truth record in the sequence's (preprocessed) coordinates."""
    ann = seq.annotation
    if ann is None:
        return None
    return {"cx": ann.cx, "cy": ann.cy, "class": ann.label, "class_id": ann.class_id}


def evaluate_model(model, sequences, cfg: PipelineConfig, minip_mode=False, jobs=1):
    """Run the full pipeline over sequences; returns (outcomes, report)."""
    def run_one(seq):
        pre = preprocess(seq, cfg)
        dets = infer_sequence(model, pre, cfg, minip_mode=minip_mode)
        winner = postprocess(dets, cfg)
        return judge_sequence(winner, gt_for_judging(pre), cfg.judge, pre.sequence_id)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_one, sequences))
    else:
        outcomes = [run_one(s) for s in sequences]
    return outcomes, aggregate(outcomes)
