"""Segment-based odometry errors, forgetting matrices and AQ/RQ scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, chain_relative, pose_compose, pose_inverse, rotation_angle

DEFAULT_SEGMENTS = (10.0, 20.0, 30.0, 40.0)
KITTI_SEGMENTS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass
class TrajectoryRecord:
    timestamps: np.ndarray
    poses: list                       # camera-to-world Pose per timestamp

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("one timestamp per pose required")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def origin_aligned(self) -> "TrajectoryRecord":
        if not self.poses:
            return self
        inv0 = pose_inverse(self.poses[0])
        return TrajectoryRecord(self.timestamps, [pose_compose(inv0, p) for p in self.poses])

    def matrices(self) -> np.ndarray:
        return np.stack([p.matrix() for p in self.poses])


@dataclass
class SegmentErrors:
    t_err: float                      # percent
    r_err: float                      # degrees per meter
    per_length: dict = field(default_factory=dict)   # L -> (t_err, r_err, count)
    n_segments: int = 0

    def to_dict(self) -> dict:
        return {"t_err": self.t_err, "r_err": self.r_err, "n_segments": self.n_segments,
                "per_length": {str(k): list(v) for k, v in self.per_length.items()}}


def path_distances(poses) -> np.ndarray:
    pos = np.stack([p.translation for p in poses])
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _segment_end(dist: np.ndarray, first: int, length: float) -> int:
    # first index whose arclength from ``first`` reaches ``length``
    j = int(np.searchsorted(dist, dist[first] + length, side="left"))
    return j if j < len(dist) else -1


def kitti_errors(gt, est, segment_lengths=DEFAULT_SEGMENTS, step: int = 1) -> SegmentErrors:
    """Mean relative translation (%) and rotation (deg/m) error over all
    segments of the given lengths, measured along the ground-truth path.

    Every ``step``-th frame is a candidate segment start.  A segment ends at
    the first frame whose ground-truth arclength from the start is at least
    ``L``.
    """
    gt_poses = gt.poses if isinstance(gt, TrajectoryRecord) else list(gt)
    est_poses = est.poses if isinstance(est, TrajectoryRecord) else list(est)
    if len(gt_poses) != len(est_poses):
        raise ValueError("trajectories must have equal length")
    if isinstance(gt, TrajectoryRecord) and isinstance(est, TrajectoryRecord):
        if not np.allclose(gt.timestamps, est.timestamps):
            raise ValueError("trajectory timestamps do not match")
    if len(gt_poses) < 2:
        raise ValueError("trajectory shorter than every segment length")
    g = np.stack([p.matrix() for p in gt_poses])
    e = np.stack([p.matrix() for p in est_poses])
    dist = path_distances(gt_poses)
    per_len = {}
    t_all, r_all = [], []
    for length in segment_lengths:
        ts, rs = [], []
        for first in range(0, len(g), step):
            last = _segment_end(dist, first, length)
            if last < 0:
                continue
            dg = np.linalg.solve(g[first], g[last])
            de = np.linalg.solve(e[first], e[last])
            err = np.linalg.solve(de, dg)
            ts.append(np.linalg.norm(err[:3, 3]) / length)
            rs.append(np.degrees(rotation_angle(err[:3, :3])) / length)
        if ts:
            per_len[float(length)] = (100.0 * float(np.mean(ts)), float(np.mean(rs)), len(ts))
            t_all += ts
            r_all += rs
    if not t_all:
        raise ValueError("trajectory shorter than every segment length")
    return SegmentErrors(100.0 * float(np.mean(t_all)), float(np.mean(r_all)), per_len, len(t_all))


def trajectory_from_motions(timestamps, motions) -> TrajectoryRecord:
    """Absolute trajectory from ``O_{k-1->k}`` motions, first pose at the origin."""
    return TrajectoryRecord(timestamps, chain_relative(motions))


# ------------------------------------------------------- continual learning

@dataclass
class ContinualReport:
    """Errors of every checkpoint (column) on every evaluation sequence (row)."""

    sequences: list
    steps: list
    cells: dict                        # (sequence, step) -> SegmentErrors
    current: dict = field(default_factory=dict)   # step -> sequence adapted in that step
    scores: dict = field(default_factory=dict)

    def value(self, seq: str, step: str, metric: str = "t_err") -> float:
        return getattr(self.cells[(seq, step)], metric)

    def matrix(self, metric: str = "t_err") -> np.ndarray:
        return np.array([[self.value(s, c, metric) for c in self.steps] for s in self.sequences])

    def to_csv(self) -> str:
        head = ["sequence"] + [f"{c}:{m}" for c in self.steps for m in ("t_err", "r_err")]
        lines = [",".join(head)]
        for s in self.sequences:
            row = [s]
            for c in self.steps:
                cell = self.cells[(s, c)]
                row += [f"{cell.t_err:.6f}", f"{cell.r_err:.6f}"]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "sequences": list(self.sequences),
            "steps": list(self.steps),
            "current": dict(self.current),
            "cells": {f"{s}|{c}": self.cells[(s, c)].to_dict() for s in self.sequences for c in self.steps},
            "scores": dict(self.scores),
        }


def forgetting_matrix(runs, eval_sequences, evaluate) -> ContinualReport:
    """Evaluate every checkpoint on every sequence without adapting.

    ``runs`` is an ordered list of ``(step_label, checkpoint)`` pairs (a
    checkpoint may be ``None`` only if ``evaluate`` accepts it);
    ``eval_sequences`` maps a name to whatever ``evaluate(checkpoint, seq)``
    consumes.  ``evaluate`` returns :class:`SegmentErrors`.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("no adaptation steps given")
    cells = {}
    for label, ck in runs:
        if ck is None:
            raise ValueError(f"missing checkpoint for step {label!r}")
        for name, seq in eval_sequences.items():
            cells[(name, label)] = evaluate(ck, seq)
    return ContinualReport(list(eval_sequences), [lbl for lbl, _ in runs], cells)


@dataclass(frozen=True)
class Revisit:
    sequence: str
    with_intermediate: str     # step label after an intermediate domain
    without_intermediate: str  # step label without it


@dataclass(frozen=True)
class Protocol:
    """Which matrix cells the AQ/RQ summary reads.

    ``first_visits`` are ``(sequence, step)`` cells where the sequence's
    domain is seen for the first time; ``source_step`` is the unadapted
    model column used as the error ceiling.
    """

    first_visits: tuple
    revisits: tuple
    source_step: str = "source"


def aq_rq(report: ContinualReport, protocol: Protocol) -> dict:
    """Adaptation quality and retention quality.

    ``AQ = 1 - mean(clip(err / err_source, 0, 1))`` over first-visit cells;
    ``RQ = mean(err_without - err_with)`` over revisits, with errors as
    fractions (percent / 100 and degree / 100) so a positive RQ means the
    intermediate domain did not hurt.
    """
    out = {}
    for metric, key in (("t_err", "trans"), ("r_err", "rot")):
        ratios = []
        for seq, step in protocol.first_visits:
            try:
                err = report.value(seq, step, metric)
                ceiling = report.value(seq, protocol.source_step, metric)
            except KeyError as exc:
                raise ValueError(f"matrix is missing cell {exc.args[0]}") from None
            ratios.append(1.0 if ceiling <= 0 and err > 0 else
                          0.0 if ceiling <= 0 else min(max(err / ceiling, 0.0), 1.0))
        out[f"AQ_{key}"] = 1.0 - float(np.mean(ratios)) if ratios else float("nan")
        diffs = []
        for rv in protocol.revisits:
            try:
                w = report.value(rv.sequence, rv.with_intermediate, metric)
                wo = report.value(rv.sequence, rv.without_intermediate, metric)
            except KeyError as exc:
                raise ValueError(f"matrix is missing cell {exc.args[0]}") from None
            diffs.append((wo - w) / 100.0)
        out[f"RQ_{key}"] = float(np.mean(diffs)) if diffs else float("nan")
    return out


# ------------------------------------------------------------- inference

def gated_indices(seq, min_drive_dist: float = 0.2) -> np.ndarray:
    """Indices of the frames a drive-distance gate accepts from ``seq``."""
    from .adapter import FrameInput, GateState, gate_frame

    gate = GateState(min_drive_dist)
    keep = [i for i in range(len(seq.frames))
            if gate_frame(gate, FrameInput(None, float(seq.speeds[i]), float(seq.timestamps[i])))]
    return np.asarray(keep, dtype=int)


def estimate_motions(pose_net, frames, batch: int = 32) -> list:
    """``O_{k-1->k}`` for every consecutive pair of ``(n, H, W, 3)`` frames."""
    from .geometry import Twist, se3_exp
    from .model import pose_forward_batch

    frames = np.asarray(frames)
    motions = []
    for s in range(1, len(frames), batch):
        e = min(s + batch, len(frames))
        tw = pose_forward_batch(pose_net, frames[s - 1:e - 1], frames[s:e])
        motions += [se3_exp(Twist.from_vector(v)) for v in tw]
    return motions


def estimate_trajectory(pose_net, seq, min_drive_dist: float = 0.2) -> tuple:
    """Estimated and origin-aligned ground-truth trajectories over the gated frames."""
    idx = gated_indices(seq, min_drive_dist)
    ts = np.asarray(seq.timestamps)[idx]
    est = trajectory_from_motions(ts, estimate_motions(pose_net, np.asarray(seq.frames)[idx]))
    gt = TrajectoryRecord(ts, [seq.gt_poses[i] for i in idx]).origin_aligned()
    return est, gt


def evaluate_sequence(pose_net, seq, segment_lengths=DEFAULT_SEGMENTS,
                      min_drive_dist: float = 0.2) -> SegmentErrors:
    est, gt = estimate_trajectory(pose_net, seq, min_drive_dist)
    return kitti_errors(gt, est, segment_lengths)
