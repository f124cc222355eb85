"""Gazemap geometry and condition-tensor tests against the closed form."""

import math

import numpy as np
import pytest

from gazeredirect.gazemap import (
    CONDITION_CHANNELS,
    GazeAngle,
    build_condition,
    condition_at_scale,
    denormalize_angle_pair,
    iris_center,
    normalize_angle_pair,
    rasterize_gazemap,
)

SWING = math.cos(math.asin(0.5))  # sqrt(3)/2

GRID_PITCHES = (-10.0, 0.0, 10.0)
GRID_YAWS = (-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0)


def mask_centroid(mask):
    idx = np.argwhere(mask)
    return idx[:, 0].mean() + 0.5, idx[:, 1].mean() + 0.5


def test_zero_angle_iris_is_centered_circle():
    gm = rasterize_gazemap(GazeAngle(0, 0), 64, 64)
    mu, nu = iris_center(GazeAngle(0, 0), 64, 64)
    assert (mu, nu) == (32.0, 32.0)
    ci, cj = mask_centroid(gm[1])
    assert abs(ci - 32.0) <= 0.5 and abs(cj - 32.0) <= 0.5
    # minor == major: the iris is a circle of diameter k = 0.6 * 64 = 38.4
    rows = np.flatnonzero(gm[1].any(axis=1))
    cols = np.flatnonzero(gm[1].any(axis=0))
    assert rows.size == cols.size
    assert abs(rows.size - 38.4) <= 1.0


def test_iris_center_matches_numeric_oracle():
    # direct evaluation of the closed form in degrees->radians
    mu, nu = iris_center(GazeAngle(0, 15), 64, 64)
    assert abs(mu - (32 - 38.4 * SWING * math.sin(math.radians(15)))) < 1e-12
    assert abs(mu - 23.39) < 0.01
    assert nu == 32.0

    mu, nu = iris_center(GazeAngle(10, 0), 64, 64)
    assert mu == 32.0
    assert abs(nu - (32 - 38.4 * SWING * math.sin(math.radians(10)))) < 1e-12
    assert abs(nu - 26.23) < 0.01


def test_measured_centroid_tracks_closed_form_on_grid():
    for pitch in GRID_PITCHES:
        for yaw in GRID_YAWS:
            gm = rasterize_gazemap(GazeAngle(pitch, yaw), 64, 64)
            mu, nu = iris_center(GazeAngle(pitch, yaw), 64, 64)
            ci, cj = mask_centroid(gm[1])
            assert abs(ci - mu) <= 1.0, (pitch, yaw)
            assert abs(cj - nu) <= 1.0, (pitch, yaw)


def test_iris_contained_in_eyeball_everywhere():
    for pitch in GRID_PITCHES:
        for yaw in GRID_YAWS:
            gm = rasterize_gazemap(GazeAngle(pitch, yaw), 64, 64)
            assert not (gm[1] & ~gm[0]).any()


def test_maps_are_strictly_boolean_and_deterministic():
    a = rasterize_gazemap(GazeAngle(10, -5), 48, 40)
    b = rasterize_gazemap(GazeAngle(10, -5), 48, 40)
    assert a.dtype == bool and a.shape == (2, 48, 40)
    assert (a == b).all()


def test_increasing_yaw_strictly_decreases_row_centroid():
    centroids = []
    for yaw in (0.0, 5.0, 10.0, 15.0):
        gm = rasterize_gazemap(GazeAngle(0, yaw), 64, 64)
        centroids.append(mask_centroid(gm[1])[0])
    assert all(a > b for a, b in zip(centroids, centroids[1:]))


def test_extent_and_angle_validation():
    with pytest.raises(ValueError, match=">= 8"):
        rasterize_gazemap(GazeAngle(0, 0), 4, 64)
    with pytest.raises(ValueError, match="pitch"):
        GazeAngle(95, 0)
    with pytest.raises(ValueError, match="yaw"):
        GazeAngle(0, float("nan"))


def test_identity_condition_is_all_zero_delta():
    cond = build_condition(GazeAngle(10, -5), GazeAngle(10, -5), 32, 32)
    assert cond.shape == (CONDITION_CHANNELS, 32, 32)
    np.testing.assert_array_equal(cond[:2], 0.0)
    np.testing.assert_array_equal(cond[2:4], cond[4:6])


def test_condition_delta_normalization():
    cond = build_condition(GazeAngle(0, 0), GazeAngle(10, -5), 32, 32, angle_scale=30.0)
    np.testing.assert_allclose(cond[0], 10 / 30, rtol=1e-6)
    np.testing.assert_allclose(cond[1], -5 / 30, rtol=1e-6)


def test_condition_channel_count_and_ablation():
    full = build_condition(GazeAngle(-10, 15), GazeAngle(10, 0), 32, 32)
    assert full.shape[0] == 6
    numeric_only = build_condition(
        GazeAngle(-10, 15), GazeAngle(10, 0), 32, 32, include_gazemaps=False
    )
    assert numeric_only.shape == (2, 32, 32)


def test_condition_at_scale_identity_and_broadcast():
    cond = build_condition(GazeAngle(0, 10), GazeAngle(10, -15), 64, 64)
    same = condition_at_scale(cond, 64, 64)
    assert same is cond

    small = condition_at_scale(cond, 8, 8)
    assert small.shape == (6, 8, 8)
    np.testing.assert_allclose(small[0], cond[0, 0, 0])
    np.testing.assert_allclose(small[1], cond[1, 0, 0])


def test_condition_at_scale_keeps_eyeball_center():
    cond = build_condition(GazeAngle(0, 0), GazeAngle(0, 0), 64, 64)
    small = condition_at_scale(cond, 8, 8)
    assert small[2, 4, 4] == 1.0  # eyeball mask survives decimation at center


def test_angle_normalization_roundtrip():
    np.testing.assert_array_equal(normalize_angle_pair(GazeAngle(0, 0)), [0.0, 0.0])
    np.testing.assert_allclose(
        normalize_angle_pair(GazeAngle(15, -10), scale=30.0), [0.5, -1 / 3]
    )
    rng = np.random.default_rng(0)
    for _ in range(100):
        angle = GazeAngle(*rng.uniform(-30, 30, 2))
        back = denormalize_angle_pair(normalize_angle_pair(angle))
        assert abs(back.pitch - angle.pitch) < 1e-9
        assert abs(back.yaw - angle.yaw) < 1e-9
    with pytest.raises(ValueError, match="scale"):
        normalize_angle_pair(GazeAngle(45, 0), scale=30.0)
