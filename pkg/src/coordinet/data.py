"""Synthetic pose-labelled scenes and manifest-indexed image folders.

The default scene is a 50 m x 50 m field of coloured ground landmarks seen by
a downward-looking pinhole camera flying smooth loops at 18-22 m altitude.
Camera frame convention: x right, y down, z forward (optical axis).
"""
from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
import torch
from PIL import Image
from scipy.interpolate import CubicSpline

from .geometry import InvalidInputError, Pose, axis_angle_matrix, matrix_to_quat, quat_normalize

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("image", "tx", "ty", "tz", "qx", "qy", "qz", "qw", "sequence_id", "timestamp", "split")
OPTIONAL_COLUMNS = ("occluded",)
SPLITS = ("train", "val", "test")
QUAT_WARN_TOL = 1e-4

# camera looking straight down: optical axis -Z, image x along +X, image y along -Y
DOWNWARD = np.diag([1.0, -1.0, -1.0])


class EmptyViewError(RuntimeError):
    """No landmark projects into the image; the caller should resample the pose."""


class ManifestError(ValueError):
    pass


class EmptyManifestError(ManifestError):
    pass


@dataclass
class SceneConfig:
    extent: tuple = (50.0, 50.0, 30.0)        # x, y centred on 0; z from 0 up
    n_landmarks: int = 32
    landmark_seed: int = 0
    landmark_height: tuple = (0.0, 4.0)
    landmark_radius: tuple = (0.9, 1.6)
    landmarks: list | None = None             # explicit [[x, y, z, r, g, b, radius], ...]
    image_size: tuple = (128, 128)            # H, W
    focal: float = 64.0                       # px; 90 deg horizontal FOV at 128 px
    principal_point: tuple | None = None      # (cx, cy); image centre when None
    altitude: tuple = (18.0, 22.0)
    margin: float = 7.0                       # keep cameras this far inside the xy extent
    yaw_range: float = 45.0                   # degrees, symmetric
    tilt_range: float = 5.0                   # degrees, roll/pitch
    control_points: int = 6
    fps: float = 10.0
    loop: bool = True
    background: float = 0.35
    pixel_noise: float = 0.02
    illumination_jitter: float = 0.1
    occlusion_prob: float = 0.0
    occlusion_size: tuple = (0.25, 0.5)       # rectangle side as a fraction of the image side

    def __post_init__(self):
        for name in ("extent", "landmark_height", "landmark_radius", "image_size", "altitude", "occlusion_size"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.principal_point is not None:
            self.principal_point = tuple(self.principal_point)
        pts = self.landmark_array[:, :3]
        if len(pts) < 4 or np.linalg.matrix_rank(pts - pts.mean(0), tol=1e-6) < 3:
            raise InvalidInputError("scene needs at least 4 non-coplanar landmarks")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @cached_property
    def landmark_array(self) -> np.ndarray:
        """``(N, 7)``: position, RGB in [0, 1], radius (m)."""
        if self.landmarks is not None:
            return np.asarray(self.landmarks, dtype=np.float64)
        rng = np.random.default_rng(self.landmark_seed)
        n = self.n_landmarks
        half = np.array(self.extent[:2]) / 2.0
        xy = rng.uniform(-half, half, size=(n, 2))
        z = rng.uniform(*self.landmark_height, size=(n, 1))
        hues = (np.arange(n) / n + rng.uniform(0, 1.0 / n)) % 1.0
        rng.shuffle(hues)
        sat = rng.uniform(0.6, 1.0, n)
        val = rng.uniform(0.7, 1.0, n)
        rgb = _hsv_to_rgb(hues, sat, val)
        radius = rng.uniform(*self.landmark_radius, size=(n, 1))
        return np.hstack([xy, z, rgb, radius])

    @property
    def intrinsics(self) -> np.ndarray:
        H, W = self.image_size
        cx, cy = self.principal_point if self.principal_point is not None else ((W - 1) / 2.0, (H - 1) / 2.0)
        return np.array([[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]])

    def contains(self, t) -> bool:
        t = np.asarray(t)
        half = np.array(self.extent[:2]) / 2.0
        return bool(np.all(np.abs(t[:2]) <= half + 1e-9) and 0.0 <= t[2] <= self.extent[2])


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    return np.stack([np.choose(i, [row[c] for row in table]) for c in range(3)], axis=1)


@dataclass
class SceneSample:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1], multiples of 1/255
    gt: Pose
    sequence_id: int
    timestamp: float
    occluded: bool = False
    occluder: tuple | None = None  # (row, col, height, width) in pixels


@dataclass
class Trajectory:
    poses: list
    timestamps: np.ndarray

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i):
        return self.poses[i]


def project_points(config: SceneConfig, pose: Pose, points) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection ``K [R^T | -R^T t] X``; returns pixel coords and depths."""
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = (X - pose.t) @ pose.R  # rows of R^T (X - t)
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uvw = cam @ config.intrinsics.T
        uv = uvw[:, :2] / uvw[:, 2:3]
    return uv, depth


def render_sample(config: SceneConfig, pose: Pose, rng_seed, sequence_id: int = 0,
                  timestamp: float = 0.0) -> SceneSample:
    """Deterministic rendering of the landmark field from ``pose``."""
    if not config.contains(pose.t):
        raise InvalidInputError(f"camera position {pose.t} is outside the scene extent")
    rng = np.random.default_rng(rng_seed)
    H, W = config.image_size
    lm = config.landmark_array
    uv, depth = project_points(config, pose, lm[:, :3])
    radius_px = config.focal * lm[:, 6] / np.where(depth > 0, depth, np.inf)
    inside = (
        (depth > 0.1)
        & (uv[:, 0] + radius_px > -0.5) & (uv[:, 0] - radius_px < W - 0.5)
        & (uv[:, 1] + radius_px > -0.5) & (uv[:, 1] - radius_px < H - 0.5)
    )
    if not inside.any():
        raise EmptyViewError("no landmark is visible from this pose")

    img = np.full((H, W, 3), config.background, dtype=np.float64)
    for i in np.argsort(-depth):  # far to near
        if not inside[i]:
            continue
        _draw_disc(img, uv[i], radius_px[i], lm[i, 3:6])

    img *= 1.0 + rng.uniform(-config.illumination_jitter, config.illumination_jitter)
    occluded = bool(rng.random() < config.occlusion_prob)
    rect = _draw_occluder(img, rng, config.occlusion_size) if occluded else None
    img += rng.normal(0.0, config.pixel_noise, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return SceneSample(img.astype(np.float32), pose, int(sequence_id), float(timestamp), occluded, rect)


def _draw_disc(img, center, radius, color):
    H, W, _ = img.shape
    x0 = max(int(np.floor(center[0] - radius - 1)), 0)
    x1 = min(int(np.ceil(center[0] + radius + 1)) + 1, W)
    y0 = max(int(np.floor(center[1] - radius - 1)), 0)
    y1 = min(int(np.ceil(center[1] + radius + 1)) + 1, H)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.hypot(xx - center[0], yy - center[1])
    alpha = np.clip(radius + 0.5 - d, 0.0, 1.0)[..., None]
    img[y0:y1, x0:x1] = img[y0:y1, x0:x1] * (1 - alpha) + alpha * np.asarray(color)


def _draw_occluder(img, rng, size_range):
    H, W, _ = img.shape
    h = int(round(rng.uniform(*size_range) * H))
    w = int(round(rng.uniform(*size_range) * W))
    y = int(rng.integers(0, H - h + 1))
    x = int(rng.integers(0, W - w + 1))
    shade = rng.uniform(0.05, 0.2)
    img[y:y + h, x:x + w] = shade + rng.uniform(-0.05, 0.05, size=(h, w, 1))
    return y, x, h, w


def camera_rotation(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Scene-from-camera rotation for a downward camera, angles in radians."""
    Rz = axis_angle_matrix([0, 0, 1], yaw)
    Rx = axis_angle_matrix([1, 0, 0], pitch)
    Ry = axis_angle_matrix([0, 1, 0], roll)
    return Rz @ Rx @ Ry @ DOWNWARD


def generate_trajectory(config: SceneConfig, n_frames: int, rng_seed, loop: bool | None = None) -> Trajectory:
    """Smooth camera path through random control points, sampled at ``config.fps``."""
    if n_frames < 3:
        raise InvalidInputError("a trajectory needs at least 3 frames")
    loop = config.loop if loop is None else loop
    rng = np.random.default_rng(rng_seed)
    k = max(config.control_points, 4)
    half = np.array(config.extent[:2]) / 2.0 - config.margin
    ctrl = np.column_stack([
        rng.uniform(-half[0], half[0], k),
        rng.uniform(-half[1], half[1], k),
        rng.uniform(*config.altitude, k),
        rng.uniform(-1, 1, k) * np.radians(config.yaw_range),
        rng.uniform(-1, 1, (k, 2)) * np.radians(config.tilt_range),
    ])
    if loop:
        knots = np.linspace(0.0, 1.0, k + 1)
        spline = CubicSpline(knots, np.vstack([ctrl, ctrl[:1]]), bc_type="periodic")
    else:
        spline = CubicSpline(np.linspace(0.0, 1.0, k), ctrl, bc_type="natural")
    u = np.linspace(0.0, 1.0, n_frames)
    s = spline(u)
    s[:, 0] = np.clip(s[:, 0], -half[0], half[0])
    s[:, 1] = np.clip(s[:, 1], -half[1], half[1])
    s[:, 2] = np.clip(s[:, 2], *config.altitude)
    s[:, 3] = np.clip(s[:, 3], -np.radians(config.yaw_range), np.radians(config.yaw_range))
    s[:, 4:] = np.clip(s[:, 4:], -np.radians(config.tilt_range), np.radians(config.tilt_range))
    poses = [Pose(row[:3], matrix_to_quat(camera_rotation(row[3], row[4], row[5]))) for row in s]
    return Trajectory(poses, np.arange(n_frames) / config.fps)


def frame_seed(seed: int, sequence_id: int, frame: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(sequence_id), int(frame)])


def render_sequence(config: SceneConfig, sequence_id: int, n_frames: int, seed: int) -> list[SceneSample]:
    traj = generate_trajectory(config, n_frames, np.random.SeedSequence([int(seed), int(sequence_id), 2**31]))
    return [
        render_sample(config, pose, frame_seed(seed, sequence_id, i), sequence_id, traj.timestamps[i])
        for i, pose in enumerate(traj)
    ]


# -- in-memory dataset ---------------------------------------------------------

class PoseDataset(torch.utils.data.Dataset):
    """Images as uint8 ``(N, H, W, 3)`` plus per-frame labels."""

    def __init__(self, images, t, q, sequence_ids, timestamps, occluded=None):
        self.images = np.ascontiguousarray(images, dtype=np.uint8)
        self.t = np.asarray(t, dtype=np.float64).reshape(-1, 3)
        self.q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
        self.sequence_ids = np.asarray(sequence_ids, dtype=np.int64)
        self.timestamps = np.asarray(timestamps, dtype=np.float64)
        self.occluded = np.zeros(len(self.t), bool) if occluded is None else np.asarray(occluded, bool)
        n = len(self.images)
        if not all(len(a) == n for a in (self.t, self.q, self.sequence_ids, self.timestamps, self.occluded)):
            raise InvalidInputError("dataset arrays have inconsistent lengths")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        img = torch.from_numpy(self.images[i]).permute(2, 0, 1).float() / 255.0
        return img, torch.from_numpy(self.t[i]).float(), torch.from_numpy(self.q[i]).float()

    @property
    def poses(self) -> list:
        return [Pose(t, q) for t, q in zip(self.t, self.q)]

    def subset(self, mask) -> "PoseDataset":
        mask = np.asarray(mask)
        return PoseDataset(self.images[mask], self.t[mask], self.q[mask], self.sequence_ids[mask],
                           self.timestamps[mask], self.occluded[mask])

    @classmethod
    def from_samples(cls, samples) -> "PoseDataset":
        samples = list(samples)
        if not samples:
            return cls(np.zeros((0, 1, 1, 3), np.uint8), np.zeros((0, 3)), np.zeros((0, 4)), [], [])
        return cls(
            np.stack([np.round(s.image * 255).astype(np.uint8) for s in samples]),
            [s.gt.t for s in samples], [s.gt.q for s in samples],
            [s.sequence_id for s in samples], [s.timestamp for s in samples],
            [s.occluded for s in samples],
        )

    @classmethod
    def concatenate(cls, parts) -> "PoseDataset":
        parts = [p for p in parts if len(p)]
        return cls(
            np.concatenate([p.images for p in parts]), np.concatenate([p.t for p in parts]),
            np.concatenate([p.q for p in parts]), np.concatenate([p.sequence_ids for p in parts]),
            np.concatenate([p.timestamps for p in parts]), np.concatenate([p.occluded for p in parts]),
        )


def synthesize(config: SceneConfig, sequence_ids, n_frames: int, seed: int) -> PoseDataset:
    """Render whole sequences straight into memory."""
    parts = [PoseDataset.from_samples(render_sequence(config, sid, n_frames, seed)) for sid in sequence_ids]
    if not parts:
        return PoseDataset.from_samples([])
    return PoseDataset.concatenate(parts)


# -- manifests ------------------------------------------------------------

@dataclass
class ManifestRecord:
    image: str
    t: np.ndarray
    q: np.ndarray
    sequence_id: int
    timestamp: float
    split: str
    occluded: bool = False


@dataclass
class DatasetManifest:
    records: list
    root: str = "."
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def split_sequences(self) -> dict:
        out = {s: set() for s in SPLITS}
        for r in self.records:
            out[r.split].add(r.sequence_id)
        return out

    def select(self, split: str) -> list:
        return [r for r in self.records if r.split == split]


def write_manifest(path, records, metadata: dict | None = None):
    """Delimited text: ``#``-prefixed JSON metadata line, header, one row per image."""
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(metadata or {}, sort_keys=True) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS + OPTIONAL_COLUMNS)
        for r in records:
            writer.writerow([r.image, *(f"{v:.9f}" for v in r.t), *(f"{v:.9f}" for v in r.q),
                             r.sequence_id, f"{r.timestamp:.6f}", r.split, int(r.occluded)])


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    path = os.fspath(path)
    root = os.path.dirname(os.path.abspath(path))
    metadata = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for i, line in enumerate(lines, start=1):
        if line.startswith("#") and not body:
            try:
                metadata.update(json.loads(line[1:].strip() or "{}"))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{i}: bad metadata line: {exc}") from None
        elif line.strip():
            body.append((i, line))
    if not body:
        raise EmptyManifestError(f"{path}: manifest is empty")
    header_line, header = body[0][0], next(csv.reader([body[0][1]]))
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise ManifestError(f"{path}:{header_line}: header missing columns {missing}")
    if len(body) == 1:
        raise EmptyManifestError(f"{path}: manifest has a header but no rows")

    records = []
    for lineno, line in body[1:]:
        row = next(csv.reader([line]))
        if len(row) != len(header):
            raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        d = dict(zip(header, row))
        try:
            t = np.array([float(d["tx"]), float(d["ty"]), float(d["tz"])])
            q = np.array([float(d["qx"]), float(d["qy"]), float(d["qz"]), float(d["qw"])])
            sid = int(d["sequence_id"])
            ts = float(d["timestamp"])
            occluded = bool(int(d.get("occluded", 0) or 0))
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: malformed value: {exc}") from None
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(q))):
            raise ManifestError(f"{path}:{lineno}: non-finite pose")
        if d["split"] not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {d['split']!r}")
        n = np.linalg.norm(q)
        if n == 0:
            raise ManifestError(f"{path}:{lineno}: zero quaternion")
        if abs(n - 1.0) > QUAT_WARN_TOL:
            warnings.warn(f"{path}:{lineno}: quaternion norm {n:.6f}, normalized", stacklevel=2)
        q = quat_normalize(q)
        if check_images and not os.path.exists(os.path.join(root, d["image"])):
            raise ManifestError(f"{path}:{lineno}: image file not found: {d['image']}")
        records.append(ManifestRecord(d["image"], t, q, sid, ts, d["split"], occluded))

    owner = {}
    for lineno_rec, r in zip((ln for ln, _ in body[1:]), records):
        prev = owner.setdefault(r.sequence_id, r.split)
        if prev != r.split:
            raise ManifestError(
                f"{path}:{lineno_rec}: sequence {r.sequence_id} appears in both {prev!r} and {r.split!r} splits")
    return DatasetManifest(records, root, metadata)


def load_image(path, size: tuple | None = None) -> np.ndarray:
    """uint8 ``(H, W, 3)``; resized (no padding, aspect not preserved) when ``size`` differs."""
    img = Image.open(path).convert("RGB")
    if size is not None and (img.height, img.width) != tuple(size):
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def dataset_from_manifest(manifest: DatasetManifest, split: str | None = None,
                          image_size: tuple | None = None) -> PoseDataset:
    recs = manifest.records if split is None else manifest.select(split)
    if not recs:
        raise ManifestError(f"no records for split {split!r}")
    images = np.stack([load_image(os.path.join(manifest.root, r.image), image_size) for r in recs])
    return PoseDataset(images, [r.t for r in recs], [r.q for r in recs], [r.sequence_id for r in recs],
                       [r.timestamp for r in recs], [r.occluded for r in recs])


def generate_dataset(config: SceneConfig, out_dir, splits: dict, n_frames: int, seed: int) -> DatasetManifest:
    """Render every sequence of ``splits`` (split -> sequence ids) to ``<out_dir>/<seq>/<frame>.png``."""
    seen = {}
    for split, ids in splits.items():
        if split not in SPLITS:
            raise InvalidInputError(f"unknown split {split!r}")
        for sid in ids:
            if sid in seen:
                raise InvalidInputError(f"sequence {sid} assigned to both {seen[sid]!r} and {split!r}")
            seen[sid] = split
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for sid, split in sorted(seen.items()):
        seq_dir = os.path.join(out_dir, str(sid))
        os.makedirs(seq_dir, exist_ok=True)
        for i, s in enumerate(render_sequence(config, sid, n_frames, seed)):
            rel = f"{sid}/{i:06d}.png"
            Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(os.path.join(out_dir, rel))
            records.append(ManifestRecord(rel, s.gt.t, s.gt.q, sid, s.timestamp, split, s.occluded))
    metadata = {"image_size": list(config.image_size), "resize": "stretch, no padding", "seed": seed,
                "n_frames": n_frames}
    path = os.path.join(out_dir, "manifest.csv")
    write_manifest(path, records, metadata)
    return DatasetManifest(records, os.path.abspath(out_dir), metadata)
