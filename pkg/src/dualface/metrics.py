"""Evaluation metrics over vertex displacement sequences.

All metrics compare displacements directly, so any shared template cancels
and never enters the numbers.
"""

from __future__ import annotations

import json

import numpy as np

from dataclasses import dataclass, field, asdict

from .data import MotionSequence, NeutralTemplate, motion_to_positions


@dataclass
class RegionSet:
    """Named vertex index subset (sorted, unique)."""

    name: str
    indices: np.ndarray

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        if idx.size == 0:
            raise ValueError(f"region {self.name!r} is empty")
        if idx.min() < 0:
            raise ValueError(f"region {self.name!r} has negative indices")
        self.indices = idx


def _check_pair(pred: MotionSequence, gt: MotionSequence):
    if pred.frames != gt.frames or pred.vertex_count != gt.vertex_count:
        raise ValueError(
            f"sequence mismatch: pred {pred.frames}x{pred.vertex_count}, gt {gt.frames}x{gt.vertex_count}"
        )


def _check_region(region: RegionSet, vertex_count: int):
    if region.indices.max() >= vertex_count:
        raise ValueError(f"region {region.name!r} indexes past {vertex_count} vertices")


def lip_vertex_error(pred: MotionSequence, gt: MotionSequence, lips: RegionSet) -> float:
    """Mean over frames of the worst lip-vertex L2 displacement error."""
    _check_pair(pred, gt)
    _check_region(lips, pred.vertex_count)
    diff = pred.displacements[:, lips.indices, :] - gt.displacements[:, lips.indices, :]
    per_vertex = np.linalg.norm(diff, axis=2)  # (T, |lips|)
    return float(per_vertex.max(axis=1).mean())


def dyn(motion: MotionSequence) -> np.ndarray:
    """Per-vertex population standard deviation over time of the
    displacement magnitude; shape (V,)."""
    mags = np.linalg.norm(motion.displacements, axis=2)  # (T, V)
    return mags.std(axis=0)


def fdd(pred: MotionSequence, gt: MotionSequence, upper: RegionSet) -> float:
    """Signed mean over the upper-face region of dyn(gt) - dyn(pred).

    Positive values mean the prediction moves less than the ground truth.
    """
    _check_pair(pred, gt)
    _check_region(upper, pred.vertex_count)
    delta = dyn(gt)[upper.indices] - dyn(pred)[upper.indices]
    return float(delta.mean())


def lip_distance(motion: MotionSequence, template: NeutralTemplate, upper_lip: RegionSet, lower_lip: RegionSet) -> np.ndarray:
    """Per-frame distance between the upper-lip and lower-lip centroids on
    absolute positions; shape (T,)."""
    _check_region(upper_lip, motion.vertex_count)
    _check_region(lower_lip, motion.vertex_count)
    pos = motion_to_positions(motion, template)
    a = pos[:, upper_lip.indices, :].mean(axis=1)
    b = pos[:, lower_lip.indices, :].mean(axis=1)
    return np.linalg.norm(a - b, axis=1)


@dataclass
class SequenceMetrics:
    name: str
    lve: float
    fdd: float


@dataclass
class MetricReport:
    lve: float
    fdd: float
    fdd_abs: float
    per_sequence: list[SequenceMetrics] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def format(self) -> str:
        lines = [
            f"{'sequence':<24} {'LVE':>14} {'FDD':>14}",
            *(f"{s.name:<24} {s.lve:>14.6e} {s.fdd:>14.6e}" for s in self.per_sequence),
            f"{'mean':<24} {self.lve:>14.6e} {self.fdd:>14.6e}   (|FDD| {self.fdd_abs:.6e})",
        ]
        return "\n".join(lines)


def build_report(per_sequence: list[SequenceMetrics]) -> MetricReport:
    if not per_sequence:
        raise ValueError("report needs at least one sequence")
    lve = float(np.mean([s.lve for s in per_sequence]))
    fdd_mean = float(np.mean([s.fdd for s in per_sequence]))
    fdd_abs = float(np.mean([abs(s.fdd) for s in per_sequence]))
    return MetricReport(lve=lve, fdd=fdd_mean, fdd_abs=fdd_abs, per_sequence=per_sequence)
