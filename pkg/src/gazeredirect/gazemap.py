"""Gazemap rasterization and condition-tensor assembly.

A gazemap is a two-channel Boolean image rendering a gaze angle: channel 0
is the eyeball disk, channel 1 the iris ellipse.  For an m x n map the
projected eyeball has diameter 1.2*n (radius k = 0.6*n) centered at
(m/2, n/2), and the iris center sits at

    mu = m/2 - k * cos(arcsin 1/2) * sin(yaw) * cos(pitch)
    nu = n/2 - k * cos(arcsin 1/2) * sin(pitch)

with angles in degrees converted to radians for the trig.  The iris is an
ellipse with major-axis diameter k and minor-axis diameter
k*|cos(pitch)*cos(yaw)|, its major axis perpendicular to the displacement
from the eyeball center (a circle when the displacement vanishes), and is
intersected with the eyeball mask.

The condition tensor stacks two spatially-constant planes holding the
normalized angle difference with the source and target gazemaps, giving
six channels of numeric-plus-pictorial guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import nearest_indices

EYEBALL_RADIUS_FRAC = 0.6  # radius k as a fraction of the map's second extent
IRIS_SWING_FRAC = math.cos(math.asin(0.5))  # sqrt(3)/2, iris travel per unit sine
MIN_MAP_EXTENT = 8
DEFAULT_ANGLE_SCALE = 30.0
NUMERIC_CHANNELS = 2
GAZEMAP_CHANNELS = 2
CONDITION_CHANNELS = NUMERIC_CHANNELS + 2 * GAZEMAP_CHANNELS


@dataclass(frozen=True)
class GazeAngle:
    """Eye orientation in degrees: pitch (vertical), yaw (horizontal)."""

    pitch: float
    yaw: float

    def __post_init__(self):
        for name in ("pitch", "yaw"):
            v = getattr(self, name)
            if not math.isfinite(v) or abs(v) > 90.0:
                raise ValueError(f"{name}={v!r} outside the valid range [-90, 90]")

    def as_array(self):
        return np.array([self.pitch, self.yaw], dtype=np.float64)


@dataclass(frozen=True)
class HeadPose:
    """Head rotation in degrees (yaw only)."""

    yaw: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.yaw):
            raise ValueError(f"head yaw must be finite, got {self.yaw!r}")


def iris_center(angle: GazeAngle, m: int, n: int):
    """Continuous iris-center coordinates (mu along extent m, nu along n)."""
    k = EYEBALL_RADIUS_FRAC * n
    pitch = math.radians(angle.pitch)
    yaw = math.radians(angle.yaw)
    mu = m / 2.0 - k * IRIS_SWING_FRAC * math.sin(yaw) * math.cos(pitch)
    nu = n / 2.0 - k * IRIS_SWING_FRAC * math.sin(pitch)
    return mu, nu


def iris_axes(angle: GazeAngle, n: int):
    """Major and minor iris radii in pixels for a map with second extent n."""
    k = EYEBALL_RADIUS_FRAC * n
    pitch = math.radians(angle.pitch)
    yaw = math.radians(angle.yaw)
    return k / 2.0, k * abs(math.cos(pitch) * math.cos(yaw)) / 2.0


def iris_field(angle: GazeAngle, m: int, n: int):
    """Quadratic form of the iris ellipse over pixel centers.

    Values are <= 1 inside the ellipse, 1 on its boundary.  The minor
    axis runs along the displacement from the eyeball center; with zero
    displacement the ellipse is a circle and orientation is moot.
    Returns +inf everywhere for an edge-on (zero-area) ellipse.
    """
    px = np.arange(m, dtype=np.float64)[:, None] + 0.5
    py = np.arange(n, dtype=np.float64)[None, :] + 0.5
    mu, nu = iris_center(angle, m, n)
    major_r, minor_r = iris_axes(angle, n)
    if minor_r <= 1e-9:
        return np.full((m, n), np.inf)
    du = px - mu
    dv = py - nu
    disp_u = mu - m / 2.0
    disp_v = nu - n / 2.0
    norm = math.hypot(disp_u, disp_v)
    if norm < 1e-9:
        axis_u, axis_v = 1.0, 0.0
    else:
        axis_u, axis_v = disp_u / norm, disp_v / norm
    along = du * axis_u + dv * axis_v
    across = -du * axis_v + dv * axis_u
    return (along / minor_r) ** 2 + (across / major_r) ** 2


def eyeball_field(m: int, n: int):
    """Squared distance from the eyeball center over the squared radius."""
    k = EYEBALL_RADIUS_FRAC * n
    px = np.arange(m, dtype=np.float64)[:, None] + 0.5
    py = np.arange(n, dtype=np.float64)[None, :] + 0.5
    return ((px - m / 2.0) ** 2 + (py - n / 2.0) ** 2) / (k * k)


def rasterize_gazemap(angle: GazeAngle, m: int, n: int) -> np.ndarray:
    """Render a (2, m, n) Boolean gazemap for the given angle.

    A pixel belongs to a mask when its center (i+0.5, j+0.5) lies inside
    the analytic shape; no anti-aliasing, so the map stays strictly
    Boolean.  Depends only on the angle and extents, never on any image.
    """
    if m < MIN_MAP_EXTENT or n < MIN_MAP_EXTENT:
        raise ValueError(f"map extents must be >= {MIN_MAP_EXTENT}, got {m}x{n}")
    eyeball = eyeball_field(m, n) <= 1.0
    with np.errstate(invalid="ignore"):
        iris = (iris_field(angle, m, n) <= 1.0) & eyeball
    return np.stack([eyeball, iris])


def normalize_angle_pair(angle: GazeAngle, scale=DEFAULT_ANGLE_SCALE, strict=True):
    """Map (pitch, yaw) degrees to the [-1, 1] training range by dividing by scale."""
    vec = angle.as_array() / scale
    if strict and np.abs(vec).max() > 1.0:
        raise ValueError(
            f"angle {angle} exceeds the normalization scale of {scale} degrees"
        )
    return vec


def denormalize_angle_pair(vec, scale=DEFAULT_ANGLE_SCALE) -> GazeAngle:
    vec = np.asarray(vec, dtype=np.float64)
    return GazeAngle(float(vec[0] * scale), float(vec[1] * scale))


def build_condition(
    source: GazeAngle,
    target: GazeAngle,
    m: int,
    n: int,
    angle_scale=DEFAULT_ANGLE_SCALE,
    include_gazemaps=True,
) -> np.ndarray:
    """Stack [normalized angle difference, source gazemap, target gazemap].

    Returns a float32 (6, m, n) array: two spatially-constant numeric
    planes followed by the two rasterized maps.  With
    ``include_gazemaps=False`` only the numeric planes are returned.
    """
    delta = (target.as_array() - source.as_array()) / angle_scale
    planes = np.broadcast_to(delta[:, None, None], (2, m, n))
    if not include_gazemaps:
        return np.ascontiguousarray(planes, dtype=np.float32)
    maps = np.concatenate(
        [rasterize_gazemap(source, m, n), rasterize_gazemap(target, m, n)]
    )
    return np.concatenate([planes, maps]).astype(np.float32)


def condition_at_scale(cond: np.ndarray, h: int, w: int) -> np.ndarray:
    """Rescale a condition tensor: numeric planes re-broadcast exactly,
    gazemap channels nearest-resampled.

    Accepts (C, m, n) or (B, C, m, n); the leading channels up to
    NUMERIC_CHANNELS are treated as constant planes.
    """
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    if cond.shape[-2:] == (h, w):
        return cond
    ri = nearest_indices(cond.shape[-2], h)
    ci = nearest_indices(cond.shape[-1], w)
    out = np.ascontiguousarray(cond[..., ri[:, None], ci[None, :]])
    n_numeric = min(NUMERIC_CHANNELS, cond.shape[-3])
    # constant planes carry a single value; refill instead of resampling
    values = cond[..., :n_numeric, :1, :1]
    out[..., :n_numeric, :, :] = np.broadcast_to(
        values, out[..., :n_numeric, :, :].shape
    )
    return out
