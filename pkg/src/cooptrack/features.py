"""Per-detection input features for the covariance network.

A detection contributes two features: an 18-element positional vector built
from its global box, its sensor-local box, and the sensor's local-to-global
transform, and a small synthetic appearance tensor standing in for detector
feature-map crops. The positional vector is expanded to an 18x256 sinusoidal
encoding before entering the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box7, PoseYawT, transform_box

POSITIONAL_DIM = 18
ENCODING_HALF_WIDTH = 128  # d; each scalar maps to 2*d sinusoid entries
FRAME_CONSISTENCY_TOL = 1e-6
DEFAULT_APPEARANCE_SHAPE = (8, 8, 8)  # channels, height, width

# Per-variable (min, max) normalization bounds, in f_pos order:
# global x,y,z,a,l,w,h,radial | local x,y,z,a,radial | t_x,t_y,t_z,yaw,radial
DEFAULT_BOUNDS = (
    (-100.0, 100.0), (-100.0, 100.0), (-5.0, 5.0), (-math.pi, math.pi),
    (0.0, 12.0), (0.0, 4.0), (0.0, 4.0), (0.0, 150.0),
    (-100.0, 100.0), (-100.0, 100.0), (-5.0, 5.0), (-math.pi, math.pi),
    (0.0, 150.0),
    (-100.0, 100.0), (-100.0, 100.0), (-100.0, 100.0), (-math.pi, math.pi),
    (0.0, 150.0),
)


@dataclass(frozen=True)
class PositionalFeature:
    """Raw (unnormalized) 18-vector: global(8) + local(5) + transform(5)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (POSITIONAL_DIM,):
            raise ValueError(f"positional feature must have shape (18,), got {v.shape}")
        object.__setattr__(self, "values", v)


def extract_positional(det_global: Box7, det_local: Box7, pose: PoseYawT) -> PositionalFeature:
    """Concatenate global box, local box, and transform descriptors.

    Layout: (x,y,z,a,l,w,h,r)_global + (x,y,z,a,r)_local + (t_x,t_y,t_z,yaw,r_t)
    where each r is the horizontal radial distance of its own entries.
    Raises ValueError if det_global is not det_local carried through pose.
    """
    expect = transform_box(det_local, pose)
    err = np.max(np.abs(expect.to_vector() - det_global.to_vector()))
    if err > FRAME_CONSISTENCY_TOL:
        raise ValueError(
            f"global box disagrees with transformed local box by {err:.3e}")
    g = det_global
    lo = det_local
    vals = np.array([
        g.x, g.y, g.z, g.a, g.l, g.w, g.h, math.hypot(g.x, g.y),
        lo.x, lo.y, lo.z, lo.a, math.hypot(lo.x, lo.y),
        pose.t_x, pose.t_y, pose.t_z, pose.yaw, math.hypot(pose.t_x, pose.t_y),
    ])
    return PositionalFeature(vals)


def normalize_var(x: float, var_index: int, bounds=DEFAULT_BOUNDS) -> float:
    """Map x from its configured [min, max] range onto [-pi, pi], clamping."""
    lo, hi = bounds[var_index]
    if lo >= hi:
        raise ValueError(f"bounds for variable {var_index} must satisfy min < max")
    u = (float(x) - lo) / (hi - lo)
    u = min(1.0, max(0.0, u))
    return -math.pi + 2.0 * math.pi * u


def positional_encoding(f_pos, bounds=DEFAULT_BOUNDS) -> np.ndarray:
    """Sinusoidal expansion of the normalized positional vector.

    Each normalized scalar xb becomes 256 entries with even index 2i holding
    sin(xb / 2^(i/d)) and odd index 2i+1 holding cos(xb / 2^(i/d)), d = 128.
    """
    if isinstance(f_pos, PositionalFeature):
        f_pos = f_pos.values
    f_pos = np.asarray(f_pos, dtype=float)
    if f_pos.shape != (POSITIONAL_DIM,):
        raise ValueError(f"expected 18-vector, got shape {f_pos.shape}")
    xb = np.array([normalize_var(f_pos[k], k, bounds) for k in range(POSITIONAL_DIM)])
    d = ENCODING_HALF_WIDTH
    scales = 2.0 ** (np.arange(d) / d)
    phases = xb[:, None] / scales[None, :]
    out = np.empty((POSITIONAL_DIM, 2 * d))
    out[:, 0::2] = np.sin(phases)
    out[:, 1::2] = np.cos(phases)
    return out


def encode_detection(det_global: Box7, det_local: Box7, pose: PoseYawT,
                     bounds=DEFAULT_BOUNDS) -> np.ndarray:
    """extract_positional followed by positional_encoding."""
    return positional_encoding(extract_positional(det_global, det_local, pose), bounds)


def synth_appearance(distance: float, noise_scale: float, rng: np.random.Generator,
                     shape=DEFAULT_APPEARANCE_SHAPE) -> np.ndarray:
    """Synthetic appearance tensor carrying the sensor's noise level as signal.

    Channel 0 is a constant baseline, channel 1 encodes object distance, and
    channel 2 encodes the sensor's true noise scale for this object. Remaining
    channels carry seeded texture whose amplitude grows with the noise scale,
    so a zero-noise sensor yields an exactly deterministic baseline tensor.
    """
    c, h, w = shape
    if c < 3:
        raise ValueError("appearance tensor needs at least 3 channels")
    out = np.zeros(shape, dtype=float)
    out[0] = 1.0
    out[1] = distance / 100.0
    out[2] = noise_scale
    if c > 3:
        out[3:] = noise_scale * rng.standard_normal((c - 3, h, w))
    return out
