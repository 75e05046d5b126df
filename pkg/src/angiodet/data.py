"""Sequence ingestion, preprocessing, MinIP projection, window assembly,
annotation schema, and a deterministic synthetic contrast-flow generator.

Synthetic sequences render a branching vessel tree on a light background; a
contrast bolus front advances along the branches, darkening vessels as it
passes (contrast is dark) and washing out after a few frames. An occluded
branch truncates the front: nothing distal to the occlusion ever darkens, and
a short segment proximal to it stagnates (stays dark to the end of the
sequence). Non-ambiguous occlusions additionally carry a dense dark blob at
the occlusion site, visible in any single frame and in the MinIP; ambiguous
ones are distinguishable from a naturally ending branch only by the
stagnant-vs-flowing temporal pattern.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import Tensor

MANIFEST_FORMAT = 1
DEFAULT_CLASSES = ["occlusion"]
FULL_CLASSES = ["Extracranial ICA", "Intracranial ICA", "M1", "M2", "Unknown"]


@dataclass
class Annotation:
    """Ground-truth occlusion: class, fixed-size box center, visibility interval."""

    label: str
    class_id: int
    cx: float
    cy: float
    box: float = 40.0
    frame_first: int = 0
    frame_last: int = 0

    def __post_init__(self):
        if self.frame_first > self.frame_last:
            raise ValueError("frame_first must be <= frame_last")

    def to_json(self) -> dict:
        return {"class": self.label, "class_id": self.class_id, "cx": self.cx,
                "cy": self.cy, "box": self.box, "frame_first": self.frame_first,
                "frame_last": self.frame_last}

    @classmethod
    def from_json(cls, d: dict) -> "Annotation":
        return cls(d["class"], d["class_id"], d["cx"], d["cy"], d["box"],
                   d["frame_first"], d["frame_last"])


@dataclass
class DsaSequence:
    """Ordered stack of 2D intensity frames plus acquisition metadata."""

    sequence_id: str
    frames: np.ndarray  # (T, H, W) float32
    frame_rate: float = 2.0
    pixel_spacing: float = 0.4
    view: str = "anteroposterior"
    annotation: Annotation | None = None
    synth: dict | None = None  # generator geometry records, when synthetic

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a (T,H,W) stack with T >= 1")


# ---------------------------------------------------------------------------
# preprocessing

def normalize(seq: DsaSequence, method: str = "minmax") -> DsaSequence:
    """Per-sequence intensity normalization; constant sequences map to zeros."""
    x = seq.frames
    if method == "minmax":
        lo, hi = float(x.min()), float(x.max())
        y = np.zeros_like(x) if hi <= lo else (x - lo) / (hi - lo)
    elif method == "zscore":
        sd = float(x.std())
        y = np.zeros_like(x) if sd == 0 else (x - x.mean()) / sd
    else:
        raise ValueError(f"unknown normalization {method!r}")
    return DsaSequence(seq.sequence_id, y, seq.frame_rate, seq.pixel_spacing,
                       seq.view, seq.annotation, seq.synth)


def _catmull_rom(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def _resize_axis_weights(n_in: int, n_out: int):
    """4-tap Catmull-Rom taps/weights for one axis (pixel-center convention)."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    taps = base[:, None] + np.arange(-1, 3)[None, :]
    weights = _catmull_rom(src[:, None] - taps)
    taps = np.clip(taps, 0, n_in - 1)
    return taps, weights


def resize_bicubic(seq: DsaSequence, target: int = 640):
    """Per-frame bicubic (Catmull-Rom, a=-0.5) resize to target x target.

    Non-square frames are edge-padded to square first. Returns (sequence,
    scale); annotation coordinates and box extent are scaled by the same
    factor.
    """
    t, h, w = seq.frames.shape
    frames = seq.frames
    side = max(h, w)
    if h != w:
        frames = np.pad(frames, ((0, 0), (0, side - h), (0, side - w)), mode="edge")
    scale = target / side
    taps, wts = _resize_axis_weights(side, target)
    # rows then columns, separably
    rows = np.einsum("tkhw,hk->thw", frames[:, taps.T, :], wts)
    out = np.einsum("thkw,wk->thw", rows[:, :, taps.T], wts)
    ann = seq.annotation
    if ann is not None:
        ann = Annotation(ann.label, ann.class_id, ann.cx * scale, ann.cy * scale,
                         ann.box * scale, ann.frame_first, ann.frame_last)
    return DsaSequence(seq.sequence_id, out, seq.frame_rate,
                       seq.pixel_spacing / scale, seq.view, ann, seq.synth), scale


def flip_lr(seq: DsaSequence, flip: bool) -> DsaSequence:
    """Mirror all frames and the box center; one decision per sequence."""
    if not flip:
        return seq
    frames = seq.frames[:, :, ::-1].copy()
    ann = seq.annotation
    if ann is not None:
        w = seq.frames.shape[2]
        ann = Annotation(ann.label, ann.class_id, w - 1 - ann.cx, ann.cy,
                         ann.box, ann.frame_first, ann.frame_last)
    return DsaSequence(seq.sequence_id, frames, seq.frame_rate,
                       seq.pixel_spacing, seq.view, ann, seq.synth)


def minip(seq: DsaSequence) -> np.ndarray:
    """Per-pixel minimum intensity projection over all frames."""
    return seq.frames.min(axis=0)


def window(n_frames: int, t: int, size: int = 3) -> list[int]:
    """Frame indices around t, edge-replicated at sequence boundaries."""
    if not 0 <= t < n_frames:
        raise ValueError(f"frame index {t} out of range [0, {n_frames})")
    center = size // 2
    return [min(max(t + k - center, 0), n_frames - 1) for k in range(size)]


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SynthConfig:
    n_sequences: int = 200
    image_size: int = 128
    frames: int = 8
    branch_depth: int = 2
    bolus_speed: float = 24.0  # px/frame
    washout_frames: float = 2.0
    occlusion_prob: float = 0.8
    ambiguous_prob: float = 0.5
    noise: float = 0.02
    seed: int = 0
    classes: list = field(default_factory=lambda: list(DEFAULT_CLASSES))
    box: float = 40.0
    background: float = 0.88
    vessel_value: float = 0.25
    blob_value: float = 0.05
    stall_px: int = 8

    def to_json(self) -> dict:
        return asdict(self)


def _grow_branch(rng, start, angle, length, lo, hi):
    """1 px/step random walk confined to [lo, hi] in both coordinates."""
    pts = []
    x, y = start
    for _ in range(int(length)):
        angle += rng.normal(0.0, 0.06)
        x += math.cos(angle)
        y += math.sin(angle)
        x = min(max(x, lo), hi)
        y = min(max(y, lo), hi)
        pts.append((x, y))
    return np.array(pts), angle


def _build_tree(rng, cfg: SynthConfig):
    """Branch list: each entry has points, cumulative arc offset, parent index."""
    margin = cfg.box / 2 + 1
    lo, hi = margin, cfg.image_size - 1 - margin
    size = cfg.image_size
    x0 = size * 0.5 + rng.uniform(-0.12, 0.12) * size
    start = (min(max(x0, lo), hi), lo)
    branches = []

    def grow(start, angle, depth, arc0, parent):
        frac = rng.uniform(0.24, 0.40) if parent < 0 else rng.uniform(0.16, 0.30)
        pts, end_angle = _grow_branch(rng, start, angle, frac * size, lo, hi)
        idx = len(branches)
        branches.append({"points": pts, "arc0": arc0, "parent": parent})
        if depth > 0 and len(pts) > 2:
            end = tuple(pts[-1])
            arc_end = arc0 + len(pts)
            spread_l = rng.uniform(0.35, 0.85)
            spread_r = rng.uniform(0.35, 0.85)
            grow(end, end_angle - spread_l, depth - 1, arc_end, idx)
            grow(end, end_angle + spread_r, depth - 1, arc_end, idx)
        return idx

    grow(start, math.pi / 2 + rng.normal(0.0, 0.15), cfg.branch_depth, 0.0, -1)
    return branches


def _descendants(branches, root_idx):
    out, frontier = [], {root_idx}
    for i, b in enumerate(branches):
        if b["parent"] in frontier and i != root_idx:
            frontier.add(i)
            out.append(i)
    return out


def _disc_offsets(radius: float):
    r = int(math.ceil(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy ** 2 + dx ** 2 <= radius ** 2
    return dx[keep], dy[keep]

_VESSEL_DISC = _disc_offsets(1.4)
_BLOB_DISC = _disc_offsets(2.6)


def _stamp(canvas, xs, ys, disc, value):
    dxs, dys = disc
    px = (xs[:, None] + dxs[None, :]).round().astype(int).ravel()
    py = (ys[:, None] + dys[None, :]).round().astype(int).ravel()
    np.clip(px, 0, canvas.shape[1] - 1, out=px)
    np.clip(py, 0, canvas.shape[0] - 1, out=py)
    np.minimum.at(canvas, (py, px), value)


def synth_sequence(cfg: SynthConfig, index: int) -> DsaSequence:
    """Render one deterministic sequence from (seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    branches = _build_tree(rng, cfg)
    occluded = rng.random() < cfg.occlusion_prob
    ann = None
    synth_meta = {"ambiguous": None, "distal_points": [], "path_points": []}

    # per-point records: position, arrival arc, stalled flag, rendered flag
    render = []
    occ_branch = occ_index = None
    if occluded:
        candidates = [i for i in range(len(branches)) if len(branches[i]["points"]) > 10]
        occ_branch = int(candidates[rng.integers(len(candidates))])
        pts = branches[occ_branch]["points"]
        occ_index = int(rng.integers(int(0.35 * len(pts)), int(0.8 * len(pts))))
        ambiguous = bool(rng.random() < cfg.ambiguous_prob)
        synth_meta["ambiguous"] = ambiguous
        cls_id = int(rng.integers(len(cfg.classes)))
        occ_pt = pts[occ_index]
        dist_pts = [tuple(map(float, p)) for p in pts[occ_index + 3::4]]
        for di in _descendants(branches, occ_branch):
            dist_pts.extend(tuple(map(float, p)) for p in branches[di]["points"][::6])
        synth_meta["distal_points"] = dist_pts[:24]

    excluded = set(_descendants(branches, occ_branch)) if occluded else set()
    for bi, b in enumerate(branches):
        if bi in excluded:
            continue
        pts = b["points"]
        last = occ_index + 1 if (occluded and bi == occ_branch) else len(pts)
        arcs = b["arc0"] + np.arange(last)
        stalled = np.zeros(last, dtype=bool)
        if occluded and bi == occ_branch:
            stalled[max(0, occ_index - cfg.stall_px):] = True
        render.append((pts[:last], arcs, stalled))

    all_pts = np.concatenate([r[0] for r in render])
    all_arr = np.concatenate([r[1] for r in render]) / cfg.bolus_speed
    all_stall = np.concatenate([r[2] for r in render])
    synth_meta["path_points"] = [tuple(map(float, p)) for p in all_pts[::17]]
    if synth_meta["distal_points"]:
        # branches may cross; only record distal points clear of every
        # rendered vessel pixel so "never darkens" is checkable
        dp = np.array(synth_meta["distal_points"])
        d2 = ((dp[:, None, :] - all_pts[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        synth_meta["distal_points"] = [tuple(p) for p, ok in zip(synth_meta["distal_points"], d2 > 16.0) if ok]

    frames = np.full((cfg.frames, cfg.image_size, cfg.image_size),
                     cfg.background, dtype=np.float64)
    for f in range(cfg.frames):
        visible = (all_arr <= f) & (all_stall | (f < all_arr + cfg.washout_frames))
        if visible.any():
            _stamp(frames[f], all_pts[visible, 0], all_pts[visible, 1],
                   _VESSEL_DISC, cfg.vessel_value)
        if occluded and not synth_meta["ambiguous"]:
            occ_pt = branches[occ_branch]["points"][occ_index]
            occ_arr = (branches[occ_branch]["arc0"] + occ_index) / cfg.bolus_speed
            if occ_arr <= f:
                _stamp(frames[f], np.array([occ_pt[0]]), np.array([occ_pt[1]]),
                       _BLOB_DISC, cfg.blob_value)
    frames += rng.normal(0.0, cfg.noise, frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)

    if occluded:
        occ_pt = branches[occ_branch]["points"][occ_index]
        occ_arr = (branches[occ_branch]["arc0"] + occ_index) / cfg.bolus_speed
        first = min(int(math.ceil(occ_arr)), cfg.frames - 1)
        cls_label = cfg.classes[cls_id]
        ann = Annotation(cls_label, cls_id, float(occ_pt[0]), float(occ_pt[1]),
                         cfg.box, first, cfg.frames - 1)

    return DsaSequence(
        sequence_id=f"synth-{cfg.seed:04d}-{index:04d}",
        frames=frames.astype(np.float32),
        frame_rate=float(rng.integers(1, 5)),
        pixel_spacing=0.4,
        view="anteroposterior" if index % 2 == 0 else "lateral",
        annotation=ann,
        synth=synth_meta,
    )


def synth_generate(cfg: SynthConfig) -> list[DsaSequence]:
    return [synth_sequence(cfg, i) for i in range(cfg.n_sequences)]


# ---------------------------------------------------------------------------
# dataset container: manifest.json + one tensor blob per sequence

def save_dataset(root: str, sequences: list[DsaSequence], config: dict | None = None):
    """Write a dataset directory atomically (temp dir + rename)."""
    root = os.path.abspath(root)
    if os.path.exists(root) and os.listdir(root):
        raise FileExistsError(f"{root} exists and is not empty")
    parent = os.path.dirname(root) or "."
    tmp = tempfile.mkdtemp(dir=parent, prefix=".dataset-tmp-")
    try:
        entries = []
        for seq in sequences:
            blob_name = f"{seq.sequence_id}.bin"
            with open(os.path.join(tmp, blob_name), "wb") as f:
                f.write(Tensor(seq.frames).to_blob())
            t, h, w = seq.frames.shape
            entries.append({
                "id": seq.sequence_id, "T": t, "H": h, "W": w,
                "fps": seq.frame_rate, "spacing": seq.pixel_spacing,
                "view": seq.view, "blob": blob_name,
                "annotation": seq.annotation.to_json() if seq.annotation else None,
                "synth": seq.synth,
            })
        manifest = {"format": MANIFEST_FORMAT, "config": config, "sequences": entries}
        with open(os.path.join(tmp, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        if os.path.exists(root):
            os.rmdir(root)
        os.replace(tmp, root)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_dataset(root: str):
    """Returns (sequences, manifest dict)."""
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    sequences = []
    for e in manifest["sequences"]:
        with open(os.path.join(root, e["blob"]), "rb") as f:
            frames = Tensor.from_blob(f.read()).array
        ann = Annotation.from_json(e["annotation"]) if e["annotation"] else None
        sequences.append(DsaSequence(e["id"], frames, e["fps"], e["spacing"],
                                     e["view"], ann, e.get("synth")))
    return sequences, manifest
