"""Desk-scale metrics: geometric gaze recovery, PSNR, feature-space
distance, and the grouped redirection report.

Gaze recovery inverts the gazemap geometry: the iris centroid is located
as the dark-region centroid inside the eyeball disk, then the closed form
is solved for pitch and yaw.  The feature distance (``featdist`` in all
outputs) is an L2 over a frozen seeded extractor, deliberately not any
published perceptual metric.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gazemap import EYEBALL_RADIUS_FRAC, IRIS_SWING_FRAC, GazeAngle
from .networks import CoarseModel, ModelConfig, RefineGenerator, coarse_redirect, refine
from .tensor import Tensor


def _as_plane(image):
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
    return arr


def recover_gaze(image) -> GazeAngle:
    """Estimate the gaze angle encoded in a rendered eye or gazemap.

    A (2, m, n) input is treated as a gazemap whose iris channel is the
    dark region; anything single-channel is thresholded inside the
    eyeball disk.  Raises if no iris region can be detected or the pitch
    is too extreme for the inversion (cos(pitch) ~ 0).
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 2:
        iris = np.asarray(arr[1]) > 0.5
        m, n = iris.shape
    else:
        gray = _as_plane(arr)
        m, n = gray.shape
        k = EYEBALL_RADIUS_FRAC * n
        px = np.arange(m)[:, None] + 0.5
        py = np.arange(n)[None, :] + 0.5
        disk = (px - m / 2.0) ** 2 + (py - n / 2.0) ** 2 <= k * k
        vals = gray[disk]
        dark_floor = np.percentile(vals, 2.0)
        midtone = np.median(vals)
        threshold = dark_floor + 0.4 * (midtone - dark_floor)
        iris = disk & (gray < threshold)
    if not iris.any():
        raise ValueError("no detectable iris region in the image")
    idx = np.argwhere(iris)
    mu = idx[:, 0].mean() + 0.5
    nu = idx[:, 1].mean() + 0.5

    swing = EYEBALL_RADIUS_FRAC * n * IRIS_SWING_FRAC
    sin_pitch = np.clip((n / 2.0 - nu) / swing, -1.0, 1.0)
    pitch = math.asin(sin_pitch)
    cos_pitch = math.cos(pitch)
    if cos_pitch < 0.2:
        raise ValueError(f"pitch {math.degrees(pitch):.1f} deg too extreme to invert yaw")
    sin_yaw = np.clip((m / 2.0 - mu) / (swing * cos_pitch), -1.0, 1.0)
    return GazeAngle(math.degrees(pitch), math.degrees(math.asin(sin_yaw)))


def gaze_error_deg(recovered: GazeAngle, target: GazeAngle):
    return float(np.hypot(recovered.pitch - target.pitch, recovered.yaw - target.yaw))


def psnr(a, b):
    """Peak signal-to-noise ratio in dB over the [-1, 1] dynamic range.

    Equal inputs return float('inf') as the sentinel.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(4.0 / mse)


def _batched_images(arr):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ValueError(f"expected image batch, got shape {arr.shape}")
    return arr


def _feature_distance_batch(extractor, a, b):
    """Per-sample mean over tap layers of the RMS feature difference."""
    fa = extractor.forward(Tensor(_batched_images(a)))
    fb = extractor.forward(Tensor(_batched_images(b)))
    per_layer = []
    for ta, tb in zip(fa, fb):
        diff = ta.data.astype(np.float64) - tb.data.astype(np.float64)
        per_layer.append(np.sqrt((diff ** 2).mean(axis=(1, 2, 3))))
    return np.mean(per_layer, axis=0)


def feature_distance(extractor, a, b):
    """Frozen-extractor feature distance between two images (0 iff equal)."""
    a = _batched_images(a.data if isinstance(a, Tensor) else a)
    b = _batched_images(b.data if isinstance(b, Tensor) else b)
    if a.shape != b.shape:
        raise ValueError(f"feature_distance shapes differ: {a.shape} vs {b.shape}")
    return float(_feature_distance_batch(extractor, a, b)[0])


# -- redirection inference -----------------------------------------------------


@dataclass
class ModelBundle:
    """Everything needed to run redirection outside the training loop."""

    coarse: CoarseModel
    generator: RefineGenerator | None
    config: ModelConfig
    include_gazemaps: bool = True
    compose_residual: bool = True

    def condition(self, source: GazeAngle, target: GazeAngle):
        from .gazemap import build_condition

        return build_condition(
            source,
            target,
            self.config.image_size,
            self.config.image_size,
            angle_scale=self.config.angle_scale,
            include_gazemaps=self.include_gazemaps,
        )


def run_redirection(bundle: ModelBundle, images, source_angles, target_angles, head_yaws):
    """Redirect a batch of source images toward target angles.

    Returns dict with ``warped`` (coarse output), ``residual`` (None when
    the generator is absent or bypassed) and ``refined`` (pre-clamp final
    output), all as (B, 1, m, n) float arrays.
    """
    batch = _batched_images(images)
    cond = np.stack(
        [bundle.condition(sa, ta) for sa, ta in zip(source_angles, target_angles)]
    )
    heads = np.asarray(head_yaws, dtype=np.float64).reshape(-1)
    src_t = Tensor(batch)
    _, warped = coarse_redirect(bundle.coarse, src_t, heads, cond)
    if bundle.generator is None:
        return {"warped": warped.data, "residual": None, "refined": warped.data}
    if bundle.compose_residual:
        residual, refined = refine(bundle.generator, warped, src_t, heads, cond)
        return {"warped": warped.data, "residual": residual.data, "refined": refined.data}
    direct = bundle.generator.forward(warped, src_t, heads, cond)
    return {"warped": warped.data, "residual": None, "refined": direct.data}


# -- grouped evaluation ----------------------------------------------------------


@dataclass
class PairRecord:
    subject_id: str
    eye_side: str
    head_yaw: float
    source_pitch: float
    source_yaw: float
    target_pitch: float
    target_yaw: float
    group: int
    gaze_err: float
    base_gaze_err: float
    featdist: float
    featdist_coarse: float
    psnr_db: float


@dataclass
class GroupRow:
    group: int
    gaze_err: float
    featdist: float
    psnr_db: float
    count: int


@dataclass
class EvalReport:
    groups: list
    raw: list

    def group_map(self):
        return {row.group: row for row in self.groups}


def _recover_or_nan(image, target):
    try:
        return gaze_error_deg(recover_gaze(image), target)
    except ValueError:
        return float("nan")


def evaluate(bundle: ModelBundle, pairs, extractor, batch_size=32) -> EvalReport:
    """Run redirection over pairs and aggregate per angle-difference group.

    Per-pair recovery failures are recorded as NaN and excluded from the
    group means; groups not present in the data are simply absent.
    """
    raw = []
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo : lo + batch_size]
        out = run_redirection(
            bundle,
            np.stack([p.source.image for p in chunk]),
            [p.source.gaze for p in chunk],
            [p.target.gaze for p in chunk],
            [p.source.head.yaw for p in chunk],
        )
        refined = np.clip(out["refined"], -1.0, 1.0)
        warped = np.clip(out["warped"], -1.0, 1.0)
        targets = np.stack([p.target.image for p in chunk])[:, None]
        fd_refined = _feature_distance_batch(extractor, refined, targets)
        fd_coarse = _feature_distance_batch(extractor, warped, targets)
        for i, p in enumerate(chunk):
            raw.append(
                PairRecord(
                    subject_id=p.source.subject_id,
                    eye_side=p.source.eye_side,
                    head_yaw=p.source.head.yaw,
                    source_pitch=p.source.gaze.pitch,
                    source_yaw=p.source.gaze.yaw,
                    target_pitch=p.target.gaze.pitch,
                    target_yaw=p.target.gaze.yaw,
                    group=p.angle_group,
                    gaze_err=_recover_or_nan(refined[i, 0], p.target.gaze),
                    base_gaze_err=_recover_or_nan(p.source.image, p.target.gaze),
                    featdist=float(fd_refined[i]),
                    featdist_coarse=float(fd_coarse[i]),
                    psnr_db=psnr(refined[i, 0], p.target.image),
                )
            )
    groups = []
    for group in sorted({r.group for r in raw}):
        members = [r for r in raw if r.group == group]
        errs = np.array([r.gaze_err for r in members])
        with np.errstate(invalid="ignore"):
            mean_err = float(np.nanmean(errs)) if np.isfinite(errs).any() else float("nan")
        groups.append(
            GroupRow(
                group=group,
                gaze_err=mean_err,
                featdist=float(np.mean([r.featdist for r in members])),
                psnr_db=float(np.mean([r.psnr_db for r in members])),
                count=len(members),
            )
        )
    return EvalReport(groups=groups, raw=raw)


def write_report_csv(path, report: EvalReport):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group_deg", "gaze_err_deg", "featdist", "psnr_db", "count"])
        for row in report.groups:
            writer.writerow([row.group, row.gaze_err, row.featdist, row.psnr_db, row.count])


def write_raw_csv(path, report: EvalReport):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fields = [
        "subject_id", "eye_side", "head_yaw", "source_pitch", "source_yaw",
        "target_pitch", "target_yaw", "group", "gaze_err", "base_gaze_err",
        "featdist", "featdist_coarse", "psnr_db",
    ]
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in report.raw:
            writer.writerow([getattr(r, f) for f in fields])
