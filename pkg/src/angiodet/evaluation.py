"""Sequence-level judgment, per-class precision/recall aggregation, and
McNemar's exact paired test.

A sequence's prediction is its single best trajectory. It counts as a true
positive when the trajectory's representative center lies within 25 px of the
ground-truth box center, at least one member detection clears the 0.01
confidence floor, and the class matches. A far or wrong-class winner counts
as both a false positive and a false negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

TP, FP, FN, FP_AND_FN, TN = "TP", "FP", "FN", "FP_and_FN", "TN"


@dataclass
class JudgeConfig:
    center_radius_px: float = 25.0
    conf_floor: float = 0.01

    def __post_init__(self):
        if self.center_radius_px <= 0 or self.conf_floor <= 0:
            raise ValueError("judge constants must be positive")


@dataclass
class SequenceOutcome:
    sequence_id: str
    gt_class: object  # class label or None
    result: str

    @property
    def correct(self) -> bool:
        return self.result in (TP, TN)

    def to_json(self) -> dict:
        return {"sequence_id": self.sequence_id, "gt_class": self.gt_class,
                "result": self.result}

    @classmethod
    def from_json(cls, d: dict) -> "SequenceOutcome":
        return cls(d["sequence_id"], d.get("gt_class"), d["result"])


def trajectory_center(traj) -> tuple[float, float]:
    """Confidence-weighted mean of member-detection centers."""
    wsum = sum(d.confidence for d in traj.detections)
    if wsum <= 0:
        n = len(traj.detections)
        return (sum(d.cx for d in traj.detections) / n,
                sum(d.cy for d in traj.detections) / n)
    return (sum(d.confidence * d.cx for d in traj.detections) / wsum,
            sum(d.confidence * d.cy for d in traj.detections) / wsum)


def judge_sequence(winner, gt, cfg: JudgeConfig, sequence_id: str = "") -> SequenceOutcome:
    """winner: best Trajectory or None; gt: dict with 'cx','cy','class' in
    model-input coordinates, or None when the sequence has no occlusion."""
    qualifies = (winner is not None
                 and max(d.confidence for d in winner.detections) >= cfg.conf_floor)
    if gt is None:
        return SequenceOutcome(sequence_id, None, FP if qualifies else TN)
    if not qualifies:
        return SequenceOutcome(sequence_id, gt["class"], FN)
    cx, cy = trajectory_center(winner)
    dist = math.hypot(cx - gt["cx"], cy - gt["cy"])
    if dist <= cfg.center_radius_px and winner.class_id == gt["class_id"]:
        return SequenceOutcome(sequence_id, gt["class"], TP)
    return SequenceOutcome(sequence_id, gt["class"], FP_AND_FN)


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    samples: int = 0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def instances(self) -> int:
        return self.tp + self.fn


@dataclass
class MetricsReport:
    per_class: dict = field(default_factory=dict)
    overall: ClassCounts = field(default_factory=ClassCounts)

    def to_json(self) -> dict:
        def row(c: ClassCounts):
            return {"samples": c.samples, "instances": c.instances,
                    "TP": c.tp, "FP": c.fp, "FN": c.fn,
                    "precision_pct": 100.0 * c.precision,
                    "recall_pct": 100.0 * c.recall}
        return {"all": row(self.overall),
                "classes": {k: row(v) for k, v in self.per_class.items()}}

    def to_table(self) -> str:
        rows = [("Class", "Samples", "Instances", "P (%)", "R (%)")]
        def fmt(name, c: ClassCounts):
            return (name, str(c.samples), str(c.instances),
                    f"{100.0 * c.precision:.2f}", f"{100.0 * c.recall:.2f}")
        rows.append(fmt("all", self.overall))
        for name in sorted(self.per_class):
            rows.append(fmt(str(name), self.per_class[name]))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
                         for r in rows)


def aggregate(outcomes: list) -> MetricsReport:
    """Sum counts per class; FP_and_FN contributes one FP and one FN."""
    report = MetricsReport()
    for o in outcomes:
        targets = [report.overall]
        if o.gt_class is not None:
            targets.append(report.per_class.setdefault(o.gt_class, ClassCounts()))
        for c in targets:
            c.samples += 1
            if o.result == TP:
                c.tp += 1
            elif o.result == FP:
                c.fp += 1
            elif o.result == FN:
                c.fn += 1
            elif o.result == FP_AND_FN:
                c.fp += 1
                c.fn += 1
            elif o.result == TN:
                c.tn += 1
            else:
                raise ValueError(f"unknown outcome {o.result!r}")
    return report


def mcnemar(correct_a: list, correct_b: list) -> dict:
    """Exact two-sided McNemar test on paired correct/incorrect flags.

    b = cases only model A got right, c = only model B. p = 2 * min(P(X <=
    min(b,c)), 0.5) with X ~ Binomial(b+c, 1/2); p = 1 when b + c = 0.
    """
    if len(correct_a) != len(correct_b):
        raise ValueError("paired flag lists must have equal length")
    b = sum(1 for x, y in zip(correct_a, correct_b) if x and not y)
    c = sum(1 for x, y in zip(correct_a, correct_b) if y and not x)
    n = b + c
    if n == 0:
        return {"b": b, "c": c, "p_value": 1.0}
    m = min(b, c)
    cdf = Fraction(sum(math.comb(n, i) for i in range(m + 1)), 2 ** n)
    p = 2 * min(cdf, Fraction(1, 2))
    return {"b": b, "c": c, "p_value": float(p)}
