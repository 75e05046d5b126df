"""Temporal-consistency post-processing: link per-frame detections into
trajectories, score each as (sum of confidences) x duration, and pick the
single best trajectory per sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .detector import Detection


@dataclass
class LinkConfig:
    radius_px: float = 15.0
    max_gap: int = 0

    def __post_init__(self):
        if self.radius_px <= 0:
            raise ValueError("radius_px must be positive")
        if self.max_gap < 0:
            raise ValueError("max_gap must be >= 0")


@dataclass
class Trajectory:
    detections: list = field(default_factory=list)
    class_id: int = 0

    @property
    def score(self) -> float:
        return sum(d.confidence for d in self.detections) * len(self.detections)

    @property
    def duration(self) -> int:
        return len(self.detections)

    @property
    def start_frame(self) -> int:
        return self.detections[0].frame_index

    @property
    def last(self) -> Detection:
        return self.detections[-1]

    def to_json(self) -> dict:
        return {"class": self.class_id, "score": self.score,
                "detections": [d.to_json() for d in self.detections]}

    @classmethod
    def from_json(cls, d: dict) -> "Trajectory":
        return cls([Detection.from_json(x) for x in d["detections"]], d["class"])


def _center_distance(a: Detection, b: Detection) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def group_by_frame(dets: list) -> dict:
    by_frame: dict[int, list] = {}
    for d in dets:
        by_frame.setdefault(d.frame_index, []).append(d)
    return by_frame


def link(dets_by_frame: dict, cfg: LinkConfig) -> list:
    """Greedy same-class nearest-center linking, frames in order.

    Within each frame, (trajectory, detection) pairs are assigned globally by
    ascending distance; ties prefer the higher-confidence detection, then the
    lower class id. Unmatched detections open new trajectories; trajectories
    unextended for more than max_gap frames are closed.
    """
    if not dets_by_frame:
        return []
    active: list[tuple[Trajectory, int]] = []  # (traj, last frame index)
    closed: list[Trajectory] = []
    for frame in sorted(dets_by_frame):
        # retire stale trajectories
        still = []
        for traj, last_f in active:
            if frame - last_f > cfg.max_gap + 1:
                closed.append(traj)
            else:
                still.append((traj, last_f))
        active = still
        dets = dets_by_frame[frame]
        pairs = []
        for ti, (traj, _) in enumerate(active):
            for di, det in enumerate(dets):
                if det.class_id != traj.class_id:
                    continue
                dist = _center_distance(traj.last, det)
                if dist <= cfg.radius_px:
                    pairs.append((dist, -det.confidence, det.class_id, ti, di))
        pairs.sort()
        used_t, used_d = set(), set()
        for dist, _negconf, _cid, ti, di in pairs:
            if ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            active[ti][0].detections.append(dets[di])
            active[ti] = (active[ti][0], frame)
        for di, det in enumerate(dets):
            if di not in used_d:
                active.append((Trajectory([det], det.class_id), frame))
    return closed + [traj for traj, _ in active]


def score(traj: Trajectory) -> float:
    """(sum of member confidences) x (number of member detections)."""
    if not traj.detections:
        raise ValueError("cannot score an empty trajectory")
    return traj.score


def select_best(trajs: list) -> Trajectory | None:
    """Highest score; ties broken by longer duration, then earlier start."""
    if not trajs:
        return None
    return max(trajs, key=lambda t: (t.score, t.duration, -t.start_frame))
