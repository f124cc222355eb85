"""Synthetic eye corpus, dataset ingestion, image I/O, and checkpoints.

The synthetic renderer is a desk-scale stand-in for a labelled gaze
corpus: images are built from the gazemap geometry, so the gaze written
into a sample can be recovered from its pixels by the inversion in the
evaluation module.  Pixel values live in [-1, 1]; 8-bit PNGs round-trip
exactly at all 256 levels.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .gazemap import GazeAngle, HeadPose, rasterize_gazemap

PITCH_GRID = (-10.0, 0.0, 10.0)
YAW_GRID = (-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0)
HEAD_GRID = (-30.0, -15.0, 0.0, 15.0, 30.0)
EVAL_GROUPS = (0, 10, 15, 20, 25, 30, 35, 40, 45, 50)

LABEL_COLUMNS = ("path", "pitch_deg", "yaw_deg", "head_yaw_deg", "subject_id", "eye_side")


@dataclass
class EyeSample:
    image: np.ndarray  # (m, n) float32 in [-1, 1]
    gaze: GazeAngle
    head: HeadPose
    subject_id: str
    eye_side: str

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ValueError(f"sample image must be 2-d, got shape {self.image.shape}")
        if np.abs(self.image).max() > 1.0:
            raise ValueError("sample pixel values must lie in [-1, 1]")
        if self.eye_side not in ("left", "right"):
            raise ValueError(f"eye_side must be left or right, got {self.eye_side!r}")


@dataclass
class RedirectionPair:
    source: EyeSample
    target: EyeSample

    def __post_init__(self):
        for attr in ("subject_id", "eye_side"):
            if getattr(self.source, attr) != getattr(self.target, attr):
                raise ValueError(f"pair mismatch on {attr}")
        if self.source.head != self.target.head:
            raise ValueError("pair mismatch on head pose")

    @property
    def angle_group(self):
        """|delta pitch| + |delta yaw| in degrees, rounded to int."""
        dp = abs(self.target.gaze.pitch - self.source.gaze.pitch)
        dy = abs(self.target.gaze.yaw - self.source.gaze.yaw)
        return int(round(dp + dy))


# -- synthetic rendering ----------------------------------------------------


def _style_params(style_seed):
    rng = np.random.default_rng([int(style_seed), 0x57E])
    return {
        "skin": 0.22 + 0.16 * rng.uniform(),
        "sclera": 0.55 + 0.20 * rng.uniform(),
        "iris": -0.75 + 0.18 * rng.uniform(),
        "band": 0.015 + 0.02 * rng.uniform(),
        "noise": 0.015 + 0.01 * rng.uniform(),
        "texture_rng": rng,
    }


def render_synthetic_eye(gaze: GazeAngle, head: HeadPose, style_seed: int,
                         m: int = 32, n: int = 32) -> EyeSample:
    """Deterministic stylized eye image for (gaze, head, subject style).

    The eyeball disk is shaded with a subject-toned sclera, the iris with
    a clearly darker tone graded toward a pupil at its center, and a thin
    eyelid band keyed to head pose and style occludes the extreme rows.
    Iris and eyeball boundaries are softened over roughly a pixel, and
    low-amplitude subject-static texture noise is added; the iris stays
    the darkest region so the gaze can be recovered from the pixels.
    """
    from .gazemap import EYEBALL_RADIUS_FRAC, eyeball_field, iris_axes, iris_field

    style = _style_params(style_seed)
    img = np.full((m, n), style["skin"], dtype=np.float64)

    eye_q = eyeball_field(m, n)
    # quadratic fields change by ~2/r per boundary pixel; scale the soft
    # band to about 1.2 px either way
    eye_soft = np.clip((1.0 - eye_q) * (EYEBALL_RADIUS_FRAC * n) / 2.4 + 0.5, 0.0, 1.0)
    img = eye_soft * style["sclera"] + (1.0 - eye_soft) * img

    iris_q = iris_field(gaze, m, n)
    _, minor_r = iris_axes(gaze, n)
    with np.errstate(invalid="ignore"):
        iris_soft = np.clip((1.0 - iris_q) * minor_r / 2.4 + 0.5, 0.0, 1.0)
        pupil = np.clip(1.0 - iris_q * 2.5, 0.0, 1.0)
    iris_tone = style["iris"] + 0.12 * (1.0 - pupil)  # darkest at the center
    img = iris_soft * iris_tone + (1.0 - iris_soft) * img

    # smooth occlusion bands at the top and bottom rows; kept thin so the
    # iris is never meaningfully covered
    rows = np.arange(m, dtype=np.float64)[:, None] + 0.5
    shift = head.yaw / 30.0
    top = m * (style["band"] * (1.0 + 0.5 * shift))
    bottom = m * (style["band"] * (1.0 - 0.5 * shift))
    lid_tone = style["skin"] * 0.85
    w_top = np.clip(top - rows + 0.5, 0.0, 1.0)
    w_bot = np.clip(rows - (m - bottom) + 0.5, 0.0, 1.0)
    w = np.maximum(w_top, w_bot)
    img = w * lid_tone + (1.0 - w) * img

    img += style["noise"] * style["texture_rng"].standard_normal((m, n))
    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    side = "left" if style_seed % 2 == 0 else "right"
    return EyeSample(img, gaze, head, f"s{int(style_seed):03d}", side)


def make_pair_dataset(count: int, seed: int, pitch_grid=PITCH_GRID, yaw_grid=YAW_GRID,
                      head_grid=HEAD_GRID, styles=tuple(range(50)), size: int = 32):
    """Draw redirection pairs from the angle grid, deterministically.

    Source and target share subject style, eye side and head pose; the
    angle-difference sum is rejection-sampled into the ten evaluation
    groups.  Rendering is cached per (gaze, head, style) so repeated grid
    points are cheap.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not pitch_grid or not yaw_grid or not head_grid or not len(styles):
        raise ValueError("angle/head/style grids must be non-empty")
    rng = np.random.default_rng([seed, 0xDA7A])
    styles = list(styles)
    cache = {}

    def rendered(gaze, head, style):
        key = (gaze.pitch, gaze.yaw, head.yaw, style)
        if key not in cache:
            cache[key] = render_synthetic_eye(gaze, head, style, size, size)
        return cache[key]

    pairs = []
    for _ in range(count):
        style = styles[rng.integers(len(styles))]
        head = HeadPose(float(head_grid[rng.integers(len(head_grid))]))
        while True:
            src = GazeAngle(
                float(pitch_grid[rng.integers(len(pitch_grid))]),
                float(yaw_grid[rng.integers(len(yaw_grid))]),
            )
            tgt = GazeAngle(
                float(pitch_grid[rng.integers(len(pitch_grid))]),
                float(yaw_grid[rng.integers(len(yaw_grid))]),
            )
            group = round(abs(tgt.pitch - src.pitch) + abs(tgt.yaw - src.yaw))
            if group in EVAL_GROUPS:
                break
        pairs.append(RedirectionPair(rendered(src, head, style), rendered(tgt, head, style)))
    return pairs


def make_sample_dataset(count: int, seed: int, pitch_grid=PITCH_GRID, yaw_grid=YAW_GRID,
                        head_grid=HEAD_GRID, styles=tuple(range(50)), size: int = 32):
    """Draw loose samples (not pairs) from the angle grid, deterministically."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng([seed, 0x5A9])
    styles = list(styles)
    samples = []
    for _ in range(count):
        style = styles[rng.integers(len(styles))]
        head = HeadPose(float(head_grid[rng.integers(len(head_grid))]))
        gaze = GazeAngle(
            float(pitch_grid[rng.integers(len(pitch_grid))]),
            float(yaw_grid[rng.integers(len(yaw_grid))]),
        )
        samples.append(render_synthetic_eye(gaze, head, style, size, size))
    return samples


# -- pixel normalization and PNG I/O ---------------------------------------


def unit_to_uint8(values):
    """[-1, 1] floats to 8-bit; exact at all 256 representable levels."""
    return np.clip(np.round((np.asarray(values) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def uint8_to_unit(values):
    """8-bit to [-1, 1] float32; 0 -> -1.0 and 255 -> 1.0 exactly."""
    return (np.asarray(values, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def save_image_gray(path, values):
    Image.fromarray(unit_to_uint8(values), mode="L").save(path)


def load_image_gray(path):
    with Image.open(path) as img:
        if img.mode != "L":
            img = img.convert("L")
        return uint8_to_unit(np.asarray(img))


def save_gazemap_png(path, gazemap):
    """Gazemap as RGB PNG: R = eyeball mask, G = iris mask, B = 0."""
    eyeball, iris = gazemap
    rgb = np.zeros(eyeball.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.asarray(eyeball, dtype=np.uint8) * 255
    rgb[..., 1] = np.asarray(iris, dtype=np.uint8) * 255
    Image.fromarray(rgb, mode="RGB").save(path)


# -- labelled-directory ingestion -------------------------------------------


def save_dataset(samples, out_dir):
    """Write samples as PNGs plus a labels.csv in the ingestion layout."""
    out_dir = Path(out_dir)
    (out_dir / "imgs").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        rel = f"imgs/{i:05d}_{s.subject_id}_{s.eye_side[0]}.png"
        save_image_gray(out_dir / rel, s.image)
        rows.append(
            (rel, s.gaze.pitch, s.gaze.yaw, s.head.yaw, s.subject_id, s.eye_side)
        )
    labels = out_dir / "labels.csv"
    with open(labels, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABEL_COLUMNS)
        writer.writerows(rows)
    return labels


def load_dataset(root_dir, labels_file="labels.csv", expected_size=None):
    """Read a labelled eye-patch directory into EyeSamples.

    ``expected_size`` turns on strict size checking; mismatches report the
    offending labels row.  An empty labels file yields an empty dataset.
    """
    root = Path(root_dir)
    labels_path = root / labels_file if not Path(labels_file).is_absolute() else Path(labels_file)
    if not labels_path.exists():
        raise FileNotFoundError(f"labels file not found: {labels_path}")
    samples = []
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return samples
        if tuple(h.strip() for h in header) != LABEL_COLUMNS:
            raise ValueError(
                f"labels header {header} does not match {','.join(LABEL_COLUMNS)}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(LABEL_COLUMNS):
                raise ValueError(f"labels row {line_no}: expected 6 fields, got {len(row)}")
            rel, pitch, yaw, head_yaw, subject, side = (f.strip() for f in row)
            img_path = root / rel
            if not img_path.exists():
                raise FileNotFoundError(f"labels row {line_no}: missing image {img_path}")
            try:
                gaze = GazeAngle(float(pitch), float(yaw))
                head = HeadPose(float(head_yaw))
            except ValueError as exc:
                raise ValueError(f"labels row {line_no}: {exc}") from exc
            image = load_image_gray(img_path)
            if expected_size is not None and image.shape != tuple(expected_size):
                raise ValueError(
                    f"labels row {line_no}: image {rel} is {image.shape}, "
                    f"expected {tuple(expected_size)}"
                )
            samples.append(EyeSample(image, gaze, head, subject, side))
    return samples


def pairs_from_samples(samples, max_pairs=None, seed=0):
    """Build redirection pairs from loose samples sharing subject/side/head."""
    groups = {}
    for s in samples:
        groups.setdefault((s.subject_id, s.eye_side, s.head.yaw), []).append(s)
    pairs = []
    for members in groups.values():
        for a in members:
            for b in members:
                dp = abs(b.gaze.pitch - a.gaze.pitch)
                dy = abs(b.gaze.yaw - a.gaze.yaw)
                if round(dp + dy) in EVAL_GROUPS:
                    pairs.append(RedirectionPair(a, b))
    if max_pairs is not None and len(pairs) > max_pairs:
        rng = np.random.default_rng([seed, 0x5E1])
        keep = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[i] for i in sorted(keep)]
    return pairs


# -- checkpoint container -----------------------------------------------------

CHECKPOINT_MAGIC = b"CFGR"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


@dataclass
class Checkpoint:
    config: dict
    iteration: int
    seeds: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def save_checkpoint(path, ckpt: Checkpoint):
    """Serialize: magic, version, JSON metadata, then raw tensor records."""
    meta = {
        "config": ckpt.config,
        "iteration": int(ckpt.iteration),
        "seeds": ckpt.seeds,
        "scalars": ckpt.scalars,
    }
    meta_bytes = json.dumps(meta, indent=1, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        tag = _TAG_FOR_KIND.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise ValueError(f"tensor {name} has unsupported dtype {arr.dtype}")
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated checkpoint: incomplete {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"corrupt checkpoint header in {path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {version} (this build reads "
                f"version {CHECKPOINT_VERSION})"
            )
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata block").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read_exact(fh, 2, f"tensor {name} header"))
            if tag not in _DTYPE_TAGS:
                raise ValueError(f"tensor {name} has unknown dtype tag {tag}")
            shape = struct.unpack(
                f"<{ndim}I", _read_exact(fh, 4 * ndim, f"tensor {name} shape")
            )
            dtype = _DTYPE_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, nbytes, f"tensor block for {name}")
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return Checkpoint(
        config=meta["config"],
        iteration=meta["iteration"],
        seeds=meta.get("seeds", {}),
        scalars=meta.get("scalars", {}),
        tensors=tensors,
    )
