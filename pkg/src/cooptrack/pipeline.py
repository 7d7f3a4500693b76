"""Per-timestep fusion of all vehicles' detections into one track set.

Each timestep runs one association + Kalman-update round per vehicle, in
ascending vehicle id (ego first). Detections unmatched in a round birth new
tracks immediately, so later rounds in the same timestep can match them;
deferring births would let two vehicles seed duplicate tracks for the same
object. Lifecycle counting (hits, misses, kills) happens once per timestep,
after the final round, followed by the predict step for the next frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import covnet
from .association import LifecycleConfig, TrackIdAllocator, associate, finish_timestep, reportable
from .features import DEFAULT_BOUNDS, encode_detection
from .filter import (OBS_DIM, STATE_DIM, ObservationModel, ProcessModel, TrackState,
                     observation_matrix, predict, update)
from .geometry import Box7, PoseYawT, transform_box

BYTES_PER_REAL = 4
REALS_PER_SHARED_DETECTION = 17  # 7 box variables + 10 covariance residuals
EGO_CAV_ID = 0


@dataclass(frozen=True)
class FramePacket:
    """One vehicle's detections for one timestep, in its local frame."""

    timestep: int
    cav_id: int
    pose: PoseYawT
    detections: tuple  # objects with .box (Box7), .confidence, .appearance


@dataclass(frozen=True)
class ReportedTrack:
    track_id: int
    box: Box7          # global frame, value level
    score: float
    mean: object       # 10-vector, tape node during training


class ConstantCovariance:
    """Identity observation noise and identity initial covariance."""

    def residuals(self, cav_id, detection, det_global, pose):
        return None


class LearnedCovariance:
    """Covariance-network residuals, one parameter set per vehicle.

    `params_by_cav` maps cav_id to either CovNetParams (plain inference) or
    a (lifted mapping, CovNetConfig) pair produced for a training tape.
    """

    def __init__(self, params_by_cav: dict, bounds=DEFAULT_BOUNDS):
        self.params_by_cav = params_by_cav
        self.bounds = bounds

    def residuals(self, cav_id, detection, det_global, pose):
        if cav_id not in self.params_by_cav:
            raise KeyError(f"no covariance network parameters for vehicle {cav_id}")
        entry = self.params_by_cav[cav_id]
        if isinstance(entry, covnet.CovNetParams):
            params, config = entry, entry.config
        else:
            params, config = entry
        f_pos = encode_detection(det_global, detection.box, pose, self.bounds)
        f_app = detection.appearance
        if config.use_appearance and f_app is None:
            raise ValueError("detection has no appearance tensor but the "
                             "appearance branch is enabled")
        return covnet.forward(params, f_app, f_pos, config)


class CoopTracker:
    """Stateful multi-vehicle tracker for one sequence."""

    def __init__(self, cov_provider=None, q_velocity: float = 0.01,
                 assoc_iou_threshold: float = 0.1,
                 lifecycle: LifecycleConfig = None):
        self.cov = cov_provider if cov_provider is not None else ConstantCovariance()
        self.process = ProcessModel.constant_velocity(q_velocity=q_velocity)
        self.assoc_iou_threshold = assoc_iou_threshold
        self.lifecycle = lifecycle if lifecycle is not None else LifecycleConfig()
        self.tracks = []
        self.ids = TrackIdAllocator()
        self._H = observation_matrix()

    def _observation_noise(self, sigma):
        if sigma is None:
            return np.ones(OBS_DIM)
        return covnet.residual_to_obs_noise_diag(sigma)

    def _initial_cov(self, sigma):
        if sigma is None:
            return np.eye(STATE_DIM)
        return ad.diag(covnet.residual_to_init_noise_diag(sigma))

    def step(self, packets) -> list:
        """Run one timestep; returns the reported tracks (post-update).

        Packets must share one timestep and have distinct vehicle ids; they
        are processed in ascending cav_id regardless of input order.
        """
        packets = sorted(packets, key=lambda p: p.cav_id)
        if len({p.timestep for p in packets}) > 1:
            raise ValueError("packets span multiple timesteps")
        if len({p.cav_id for p in packets}) != len(packets):
            raise ValueError("duplicate cav_id in packets")

        matched_ids = set()
        for packet in packets:
            det_global = [transform_box(d.box, packet.pose) for d in packet.detections]
            track_boxes = [Box7.from_vector(t.box_vector()) for t in self.tracks]
            assignment = associate(track_boxes, det_global, self.assoc_iou_threshold)
            for ti, dj, _iou in assignment.matches:
                det = packet.detections[dj]
                sigma = self.cov.residuals(packet.cav_id, det, det_global[dj], packet.pose)
                model = ObservationModel(self._H, self._observation_noise(sigma))
                trk = update(self.tracks[ti], det_global[dj].to_vector(), model)
                if trk.id in matched_ids:
                    trk.score = max(trk.score, det.confidence)
                else:
                    trk.score = det.confidence
                matched_ids.add(trk.id)
                self.tracks[ti] = trk
            for dj in assignment.unmatched_detections:
                det = packet.detections[dj]
                sigma = self.cov.residuals(packet.cav_id, det, det_global[dj], packet.pose)
                mean = np.concatenate([det_global[dj].to_vector(), np.zeros(3)])
                trk = TrackState(mean=mean, cov=self._initial_cov(sigma),
                                 id=self.ids.next_id(), hits=0, misses=0, age=0,
                                 score=det.confidence)
                matched_ids.add(trk.id)
                self.tracks.append(trk)

        flags = [t.id in matched_ids for t in self.tracks]
        self.tracks, _killed = finish_timestep(self.tracks, flags, self.lifecycle)
        reported = [ReportedTrack(t.id, Box7.from_vector(t.box_vector()), t.score, t.mean)
                    for t in self.tracks if reportable(t, self.lifecycle)]
        self.tracks = [predict(t, self.process) for t in self.tracks]
        for t in self.tracks:
            t.age += 1
        return reported


def shared_bytes(packets) -> int:
    """V2V payload for one timestep: every non-ego detection costs 17 reals."""
    n = sum(len(p.detections) for p in packets if p.cav_id != EGO_CAV_ID)
    return n * REALS_PER_SHARED_DETECTION * BYTES_PER_REAL


def packets_from_sim_frame(frame) -> list:
    """Adapt one simulator frame into per-vehicle packets."""
    return [FramePacket(timestep=frame.timestep, cav_id=cav_id,
                        pose=frame.poses[cav_id], detections=tuple(dets))
            for cav_id, dets in sorted(frame.detections.items())]


def run_sequence(frame_packets, tracker: CoopTracker):
    """Track a whole sequence; returns (per-frame reports, per-frame bytes)."""
    reports, comm = [], []
    for index, packets in enumerate(frame_packets):
        try:
            reports.append(tracker.step(packets))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"frame {index}: {exc}") from exc
        comm.append(shared_bytes(packets))
    return reports, comm
