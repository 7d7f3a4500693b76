"""Feature extraction tests: positional layout, normalization, sinusoidal
encoding against the direct formula, and the synthetic appearance tensor."""

import math

import numpy as np
import pytest

from cooptrack.features import (
    DEFAULT_BOUNDS,
    ENCODING_HALF_WIDTH,
    POSITIONAL_DIM,
    PositionalFeature,
    encode_detection,
    extract_positional,
    normalize_var,
    positional_encoding,
    synth_appearance,
)
from cooptrack.geometry import Box7, PoseYawT, transform_box


def _consistent_pair(rng):
    pose = PoseYawT(*rng.uniform(-40, 40, size=3), rng.uniform(-math.pi, math.pi))
    local = Box7(*rng.uniform(-30, 30, size=2), rng.uniform(-2, 2),
                 rng.uniform(-math.pi, math.pi), 4.5, 1.9, 1.6)
    return transform_box(local, pose), local, pose


def test_extract_positional_layout():
    pose = PoseYawT(10.0, -20.0, 1.0, 0.5)
    local = Box7(3.0, 4.0, 0.5, 0.2, 4.5, 1.9, 1.6)
    g = transform_box(local, pose)
    f = extract_positional(g, local, pose)
    v = f.values
    assert v.shape == (POSITIONAL_DIM,)
    np.testing.assert_allclose(v[0:7], g.to_vector())
    assert v[7] == pytest.approx(math.hypot(g.x, g.y))
    np.testing.assert_allclose(v[8:12], [local.x, local.y, local.z, local.a])
    assert v[12] == pytest.approx(5.0)  # hypot(3, 4)
    np.testing.assert_allclose(v[13:17], [10.0, -20.0, 1.0, 0.5])
    assert v[17] == pytest.approx(math.hypot(10.0, -20.0))


def test_extract_positional_rejects_inconsistent_frames():
    pose = PoseYawT(10.0, -20.0, 1.0, 0.5)
    local = Box7(3.0, 4.0, 0.5, 0.2, 4.5, 1.9, 1.6)
    g = transform_box(local, pose)
    bad = Box7(g.x + 0.01, g.y, g.z, g.a, g.l, g.w, g.h)
    with pytest.raises(ValueError):
        extract_positional(bad, local, pose)


def test_positional_feature_shape_validation():
    with pytest.raises(ValueError):
        PositionalFeature(np.zeros(17))


def test_normalize_var_endpoints_and_clamp():
    # Variable 0 has bounds (-100, 100).
    assert normalize_var(-100.0, 0) == pytest.approx(-math.pi)
    assert normalize_var(100.0, 0) == pytest.approx(math.pi)
    assert normalize_var(0.0, 0) == pytest.approx(0.0)
    # Out-of-range values clamp to the endpoints rather than extrapolate.
    assert normalize_var(-500.0, 0) == pytest.approx(-math.pi)
    assert normalize_var(500.0, 0) == pytest.approx(math.pi)


def test_normalize_var_rejects_degenerate_bounds():
    with pytest.raises(ValueError):
        normalize_var(0.0, 0, bounds=(((1.0, 1.0),) * POSITIONAL_DIM))


def test_positional_encoding_matches_direct_formula():
    rng = np.random.default_rng(60)
    f = rng.uniform(-50, 50, size=POSITIONAL_DIM)
    enc = positional_encoding(f)
    d = ENCODING_HALF_WIDTH
    assert enc.shape == (POSITIONAL_DIM, 2 * d)
    for k in (0, 5, 17):
        lo, hi = DEFAULT_BOUNDS[k]
        u = min(1.0, max(0.0, (f[k] - lo) / (hi - lo)))
        xb = -math.pi + 2.0 * math.pi * u
        for i in (0, 1, 63, 127):
            phase = xb / (2.0 ** (i / d))
            assert enc[k, 2 * i] == pytest.approx(math.sin(phase), abs=1e-12)
            assert enc[k, 2 * i + 1] == pytest.approx(math.cos(phase), abs=1e-12)


def test_positional_encoding_bounded_and_shape_checked():
    rng = np.random.default_rng(61)
    enc = positional_encoding(rng.uniform(-200, 200, size=POSITIONAL_DIM))
    assert np.all(enc <= 1.0) and np.all(enc >= -1.0)
    with pytest.raises(ValueError):
        positional_encoding(np.zeros(5))


def test_encode_detection_composes():
    rng = np.random.default_rng(62)
    g, local, pose = _consistent_pair(rng)
    via_compose = encode_detection(g, local, pose)
    via_steps = positional_encoding(extract_positional(g, local, pose))
    np.testing.assert_array_equal(via_compose, via_steps)


def test_synth_appearance_channels():
    rng = np.random.default_rng(63)
    a = synth_appearance(distance=40.0, noise_scale=0.5, rng=rng)
    assert a.shape == (8, 8, 8)
    np.testing.assert_array_equal(a[0], np.ones((8, 8)))
    np.testing.assert_array_equal(a[1], np.full((8, 8), 0.4))
    np.testing.assert_array_equal(a[2], np.full((8, 8), 0.5))
    assert np.std(a[3:]) > 0.0


def test_synth_appearance_zero_noise_is_deterministic():
    # Zero noise: texture channels vanish, so rng state cannot leak in.
    a1 = synth_appearance(10.0, 0.0, np.random.default_rng(1))
    a2 = synth_appearance(10.0, 0.0, np.random.default_rng(999))
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(a1[3:], np.zeros((5, 8, 8)))


def test_synth_appearance_validates_channels():
    with pytest.raises(ValueError):
        synth_appearance(1.0, 0.1, np.random.default_rng(0), shape=(2, 8, 8))
