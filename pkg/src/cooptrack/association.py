"""IoU-based matching between tracks and detections, plus track lifecycle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Box7, iou3d

DEFAULT_IOU_THRESHOLD = 0.1
DEFAULT_MIN_HITS = 3
DEFAULT_MAX_AGE = 2
SCORE_DECAY = 0.9


@dataclass
class Assignment:
    """Partition of track and detection indices after thresholded matching."""

    matches: list  # (track_index, detection_index, iou)
    unmatched_tracks: list
    unmatched_detections: list


def build_cost_matrix(tracks, detections) -> np.ndarray:
    """Negated pairwise 3D IoU between track boxes and detection boxes.

    A center-distance prescreen skips pairs whose BEV circumcircles cannot
    overlap; those entries are exactly zero IoU anyway.
    """
    n, m = len(tracks), len(detections)
    cost = np.zeros((n, m), dtype=float)
    if n == 0 or m == 0:
        return cost
    tc = np.array([[b.x, b.y] for b in tracks])
    dc = np.array([[b.x, b.y] for b in detections])
    tr = np.array([0.5 * np.hypot(b.l, b.w) for b in tracks])
    dr = np.array([0.5 * np.hypot(b.l, b.w) for b in detections])
    dist = np.hypot(tc[:, 0:1] - dc[None, :, 0], tc[:, 1:2] - dc[None, :, 1])
    near = dist <= tr[:, None] + dr[None, :]
    for i in range(n):
        for j in range(m):
            if near[i, j]:
                cost[i, j] = -iou3d(tracks[i], detections[j])
    return cost


def hungarian_solve(cost: np.ndarray):
    """Minimum-total-cost perfect matching on the zero-padded square matrix.

    Returns (row, col) pairs restricted to the real (unpadded) entries.
    """
    cost = np.asarray(cost, dtype=float)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix entries must be finite")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    size = max(n, m)
    padded = np.zeros((size, size), dtype=float)
    padded[:n, :m] = cost
    rows, cols = linear_sum_assignment(padded)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if r < n and c < m]


def associate(tracks, detections, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> Assignment:
    """Hungarian matching on negated IoU with sub-threshold pairs demoted.

    `tracks` and `detections` are Box7 lists. A matched pair whose IoU falls
    below the threshold is returned as unmatched on both sides.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0,1), got {iou_threshold}")
    cost = build_cost_matrix(tracks, detections)
    pairs = hungarian_solve(cost)
    matches = []
    matched_t, matched_d = set(), set()
    for r, c in pairs:
        iou = -cost[r, c]
        if iou >= iou_threshold:
            matches.append((r, c, iou))
            matched_t.add(r)
            matched_d.add(c)
    return Assignment(
        matches=matches,
        unmatched_tracks=[i for i in range(len(tracks)) if i not in matched_t],
        unmatched_detections=[j for j in range(len(detections)) if j not in matched_d],
    )


@dataclass
class LifecycleConfig:
    min_hits: int = DEFAULT_MIN_HITS
    max_age: int = DEFAULT_MAX_AGE
    score_decay: float = SCORE_DECAY


class TrackIdAllocator:
    """Monotone id counter; ids are never reused within a tracking session."""

    def __init__(self):
        self._next = 0

    def next_id(self) -> int:
        out = self._next
        self._next += 1
        return out


def finish_timestep(tracks, matched_flags, cfg: LifecycleConfig):
    """End-of-timestep bookkeeping shared by the pipeline and lifecycle_step.

    Tracks matched by any sensor this timestep get hits += 1 and misses
    reset; the rest accumulate a miss, decay their score, and die once
    misses exceeds max_age. Returns (surviving_tracks, killed_ids).
    """
    survivors, killed = [], []
    for trk, matched in zip(tracks, matched_flags):
        if matched:
            trk.hits += 1
            trk.misses = 0
        else:
            trk.misses += 1
            trk.score *= cfg.score_decay
        if trk.misses > cfg.max_age:
            killed.append(trk.id)
        else:
            survivors.append(trk)
    return survivors, killed


def reportable(track, cfg: LifecycleConfig) -> bool:
    """Early-report convention: confirmed tracks, or any track still young."""
    return track.hits >= cfg.min_hits or track.age < cfg.min_hits


def lifecycle_step(tracks, assignment: Assignment, detections, cfg: LifecycleConfig,
                   ids: TrackIdAllocator, birth_fn):
    """One-sensor lifecycle update, applied after the timestep's association.

    Matched tracks are refreshed, unmatched ones age toward deletion, and
    unmatched detections birth tentative tracks through `birth_fn(det, id)`.
    Returns (surviving, birthed, killed_ids).
    """
    matched = [False] * len(tracks)
    for t_idx, _, _ in assignment.matches:
        matched[t_idx] = True
    surviving, killed = finish_timestep(tracks, matched, cfg)
    birthed = [birth_fn(detections[j], ids.next_id()) for j in assignment.unmatched_detections]
    return surviving, birthed, killed
