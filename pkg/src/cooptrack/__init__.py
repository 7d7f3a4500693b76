"""Cooperative multi-vehicle 3D multi-object tracking.

Fuses box detections from several connected vehicles in a differentiable
multi-sensor Kalman filter whose per-detection observation noise is either
constant or predicted by a small trainable network.
"""

__version__ = "0.1.0"
