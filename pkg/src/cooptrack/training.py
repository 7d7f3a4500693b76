"""Optimization of the covariance network through the tracking pipeline.

Training runs the full tracker over fixed-length windows on a gradient tape,
computes a center-gated L2 loss between reported track boxes and ground
truth, backpropagates through every update of the window (including the
covariance recursion), clips the global gradient norm across all vehicles'
parameters, and applies Adam with decoupled-from-clipping weight decay
(decay is added to the clipped gradient, then fed to the moments).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import autodiff as ad
from .association import LifecycleConfig
from .covnet import CovNetParams
from .features import DEFAULT_BOUNDS
from .geometry import wrap_angle
from .pipeline import CoopTracker, LearnedCovariance, packets_from_sim_frame

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def split_subsequences(frames, window_length: int):
    """Consecutive non-overlapping windows; a short trailing remainder is dropped."""
    if window_length < 2:
        raise ValueError("window length must be >= 2")
    n = len(frames) // window_length
    return [frames[i * window_length:(i + 1) * window_length] for i in range(n)]


def _center_distance(mean_value, gt_box, mode: str) -> float:
    dx = mean_value[0] - gt_box.x
    dy = mean_value[1] - gt_box.y
    if mode == "2d":
        return math.hypot(dx, dy)
    return math.sqrt(dx * dx + dy * dy + (mean_value[2] - gt_box.z) ** 2)


def window_loss(reports_per_frame, gt_per_frame, radius: float = 2.0,
                center_mode: str = "3d"):
    """Mean L2 error of reported boxes against their nearest ground truth.

    Only tracks whose nearest ground-truth center lies within `radius` meters
    contribute (nearest by center distance, ties to the lower ground-truth
    index). The yaw component of each target is shifted by a multiple of 2pi
    (and the magnitude wrapped) so the residual never jumps across the angle
    cut. Returns (loss, supervised_count); loss is None when no track
    qualifies anywhere in the window.
    """
    terms = []
    for reported, gts in zip(reports_per_frame, gt_per_frame):
        if not gts:
            continue
        for rt in reported:
            mean_val = ad.val(rt.mean)
            dists = [_center_distance(mean_val, box, center_mode) for _gid, box in gts]
            best = min(range(len(gts)), key=lambda i: dists[i])
            if dists[best] > radius:
                continue
            target = np.asarray(gts[best][1].to_vector(), dtype=mean_val.dtype)
            track_yaw = float(mean_val[3])
            target[3] = track_yaw - wrap_angle(track_yaw - target[3])
            diff = ad.sub(rt.mean[0:7], target)
            terms.append(ad.sqrt(ad.asum(ad.square(diff))))
    if not terms:
        return None, 0
    total = reduce(ad.add, terms)
    return ad.div(total, float(len(terms))), len(terms)


# --- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)  # (cav, name) -> array
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, param_sets: dict) -> "AdamState":
        state = cls()
        for cav, params in param_sets.items():
            for name, arr in params.arrays.items():
                state.m[(cav, name)] = np.zeros_like(arr)
                state.v[(cav, name)] = np.zeros_like(arr)
        return state


def global_grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float):
    """Scale all gradients by one factor so the global norm is <= max_norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(param_sets: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float):
    """One Adam update; weight decay is folded into the gradient first."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for cav, params in param_sets.items():
        for name, arr in params.arrays.items():
            key = (cav, name)
            g = grads[key] + weight_decay * arr
            m = state.m[key] = ADAM_BETA1 * state.m[key] + (1.0 - ADAM_BETA1) * g
            v = state.v[key] = ADAM_BETA2 * state.v[key] + (1.0 - ADAM_BETA2) * (g * g)
            arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# --- training loop --------------------------------------------------------------


@dataclass
class TrainResult:
    param_sets: dict          # distinct parameter sets actually optimized
    params_by_cav: dict       # cav_id -> CovNetParams (aliases in shared mode)
    adam: AdamState
    loss_curve: list          # {"epoch", "window", "loss", "supervised"}
    epochs_done: int


def _distinct_param_sets(params_by_cav: dict) -> dict:
    """Collapse aliased parameter objects (shared-weights mode) to one entry."""
    seen = {}
    for cav in sorted(params_by_cav):
        params = params_by_cav[cav]
        if not any(params is p for p in seen.values()):
            seen[cav] = params
    return seen


def train(frames, params_by_cav: dict, settings, tracker_settings,
          bounds=DEFAULT_BOUNDS, adam: AdamState = None, epochs_done: int = 0):
    """Optimize all covariance networks on one simulated sequence.

    `frames` is the simulator output (SimFrame list), `settings` a
    TrainSettings, `tracker_settings` a TrackerSettings. Pass the Adam state
    and `epochs_done` from a checkpoint to resume; resumed training is
    bit-identical to an uninterrupted run because window order is fixed and
    the loop consumes no randomness.
    """
    windows = split_subsequences(frames, settings.window_length)
    param_sets = _distinct_param_sets(params_by_cav)
    if adam is None:
        adam = AdamState.init(param_sets)
    lifecycle = LifecycleConfig(min_hits=tracker_settings.min_hits,
                                max_age=tracker_settings.max_age,
                                score_decay=tracker_settings.score_decay)
    loss_curve = []
    for epoch in range(epochs_done, settings.epochs):
        for w, window in enumerate(windows):
            tape = ad.Tape()
            lifted = {cav: params.lift(tape) for cav, params in param_sets.items()}
            provider_params = {cav: (lifted[_owner(cav, param_sets, params_by_cav)],
                                     params_by_cav[cav].config)
                               for cav in params_by_cav}
            provider = LearnedCovariance(provider_params, bounds)
            tracker = CoopTracker(
                cov_provider=provider,
                q_velocity=tracker_settings.process_noise_velocity,
                assoc_iou_threshold=tracker_settings.assoc_iou_threshold,
                lifecycle=lifecycle)
            reports, gts = [], []
            for frame in window:
                reports.append(tracker.step(packets_from_sim_frame(frame)))
                gts.append(frame.gt)
            loss, supervised = window_loss(reports, gts, settings.gt_match_radius,
                                           settings.center_distance)
            if loss is None or not isinstance(loss, ad.Node):
                # no qualifying track touched the parameters; gradients are
                # all zero, so no optimizer step is taken
                value = 0.0 if loss is None else float(ad.val(loss))
                loss_curve.append({"epoch": epoch, "window": w, "loss": value,
                                   "supervised": supervised})
                continue
            loss_value = float(ad.val(loss))
            if not math.isfinite(loss_value):
                raise FloatingPointError(
                    f"non-finite loss {loss_value} in epoch {epoch}, window {w}")
            tape.backward(loss)
            grads = {}
            for cav, nodes in lifted.items():
                for name, node in nodes.items():
                    grads[(cav, name)] = ad.grad_of(node)
            grads, _norm = clip_gradients(grads, settings.grad_clip_norm)
            adam_step(param_sets, grads, adam, settings.lr, settings.weight_decay)
            loss_curve.append({"epoch": epoch, "window": w, "loss": loss_value,
                               "supervised": supervised})
    return TrainResult(param_sets=param_sets, params_by_cav=params_by_cav,
                       adam=adam, loss_curve=loss_curve, epochs_done=settings.epochs)


def _owner(cav, param_sets, params_by_cav):
    """The key in param_sets whose object backs this cav (handles sharing)."""
    target = params_by_cav[cav]
    for owner_cav, params in param_sets.items():
        if params is target:
            return owner_cav
    raise KeyError(f"vehicle {cav} has no registered parameter set")


def init_params_for_run(config, rng: np.random.Generator) -> dict:
    """Fresh per-vehicle parameter sets honoring the shared-weights flag."""
    net_cfg = config.covnet.covnet_config()
    if config.covnet.shared_weights:
        shared = CovNetParams.init(net_cfg, rng)
        return {cav: shared for cav in range(config.num_cavs)}
    return {cav: CovNetParams.init(net_cfg, rng) for cav in range(config.num_cavs)}
