"""Dataset ingestion, the synthetic oracle scene, and artifact export.

Frames carry an RGB image in [0, 1], a timestamp, an optional
camera-to-world pose, and (for synthetic data only) a ground-truth depth
map storing the distance along each pixel ray in meters. Ground-truth
depth exists purely for evaluation; the mapping pipeline consumes frames
through a view that exposes image and pose only.

Supported dataset layouts:

* TUM: ``rgb.txt`` (timestamp filename) plus ``groundtruth.txt``
  (timestamp tx ty tz qx qy qz qw); frames are associated to the nearest
  pose within 20 ms and dropped otherwise.
* simple: ``frames/%06d.png`` plus ``traj.txt`` with one
  "tx ty tz qx qy qz qw" line per frame (optional ``gt_depth/%06d.npy``).

Point clouds are written as ASCII PLY with float x y z and uchar
red green blue vertex properties.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .field import Decoder, FactorizedGrid, SceneBounds
from .geometry import CameraIntrinsics, Pose, format_pose_line, parse_pose_line
from .render import render_view

logger = logging.getLogger(__name__)

__all__ = [
    "Frame",
    "TumLoadReport",
    "SyntheticSceneSpec",
    "TexturedBox",
    "ColoredPointCloud",
    "load_tum",
    "load_tum_report",
    "load_simple",
    "write_simple",
    "synth_scene",
    "scene_bounds_for",
    "extract_pointcloud",
    "write_ply",
    "read_ply",
    "write_png",
    "read_png",
]

TUM_ASSOCIATION_WINDOW_S = 0.02
QUAT_RENORM_FLAG_TOL = 1e-6


@dataclass
class Frame:
    """One RGB observation; gt_depth is evaluation-only."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    timestamp: float
    pose: Pose | None = None
    gt_depth: np.ndarray | None = None  # (H, W) distance along the pixel ray, meters

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("image must be (H, W, 3)")
        if img.min() < 0 or img.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        self.image = img
        if self.gt_depth is not None:
            d = np.asarray(self.gt_depth, dtype=np.float64)
            if d.shape != img.shape[:2]:
                raise ValueError("gt_depth shape must match image")
            if np.any(d[np.isfinite(d)] <= 0):
                raise ValueError("gt_depth must be positive where defined")
            self.gt_depth = d


@dataclass(frozen=True)
class TumLoadReport:
    total_images: int
    loaded: int
    dropped: int
    renormalized_quaternions: int


def _read_lines(path: Path):
    if not path.exists():
        raise DataError(f"missing file: {path}")
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        out.append((lineno, line))
    return out


def _load_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing image: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def load_tum_report(path) -> tuple[list[Frame], TumLoadReport]:
    """Load a TUM-format directory; returns frames plus an association report."""
    root = Path(path)
    rgb_lines = _read_lines(root / "rgb.txt")
    gt_lines = _read_lines(root / "groundtruth.txt")

    pose_ts = []
    poses = []
    renormalized = 0
    for lineno, line in gt_lines:
        parts = line.split()
        if len(parts) != 8:
            raise DataError(f"{root / 'groundtruth.txt'}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            ts = float(parts[0])
            quat = np.array([float(p) for p in parts[4:8]])
            trans = np.array([float(p) for p in parts[1:4]])
        except ValueError as e:
            raise DataError(f"{root / 'groundtruth.txt'}:{lineno}: {e}") from e
        if abs(np.linalg.norm(quat) - 1.0) > QUAT_RENORM_FLAG_TOL:
            renormalized += 1
        pose_ts.append(ts)
        poses.append(Pose.from_quat(quat, trans, renormalize=True))
    if not poses:
        raise DataError(f"{root / 'groundtruth.txt'}: no poses")
    pose_ts = np.array(pose_ts)

    frames = []
    dropped = 0
    for lineno, line in rgb_lines:
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{root / 'rgb.txt'}:{lineno}: expected 'timestamp filename'")
        try:
            ts = float(parts[0])
        except ValueError as e:
            raise DataError(f"{root / 'rgb.txt'}:{lineno}: {e}") from e
        nearest = int(np.argmin(np.abs(pose_ts - ts)))
        if abs(pose_ts[nearest] - ts) > TUM_ASSOCIATION_WINDOW_S:
            dropped += 1
            continue
        frames.append(Frame(_load_image(root / parts[1]), ts, poses[nearest]))

    report = TumLoadReport(len(rgb_lines), len(frames), dropped, renormalized)
    if dropped:
        logger.info("load_tum: dropped %d of %d frames without a pose within 20 ms", dropped, len(rgb_lines))
    return frames, report


def load_tum(path) -> list[Frame]:
    frames, _ = load_tum_report(path)
    return frames


def load_simple(path) -> list[Frame]:
    """Load the simple layout: frames/%06d.png + traj.txt (+ gt_depth/%06d.npy)."""
    root = Path(path)
    frame_dir = root / "frames"
    traj = root / "traj.txt"
    if not frame_dir.is_dir():
        raise DataError(f"missing directory: {frame_dir}")
    lines = _read_lines(traj)
    files = sorted(p for p in frame_dir.iterdir() if re.fullmatch(r"\d{6}\.png", p.name))
    if len(files) != len(lines):
        raise DataError(
            f"{root}: {len(files)} frames but {len(lines)} trajectory lines"
        )
    frames = []
    for i, (p, (lineno, line)) in enumerate(zip(files, lines)):
        try:
            pose = parse_pose_line(line)
        except ValueError as e:
            raise DataError(f"{traj}:{lineno}: {e}") from e
        depth_file = root / "gt_depth" / f"{i:06d}.npy"
        gt = np.load(depth_file) if depth_file.exists() else None
        frames.append(Frame(_load_image(p), float(i), pose, gt))
    return frames


def write_simple(frames, path, *, write_gt_depth: bool = True) -> None:
    """Export frames in the simple layout (used by the synth command)."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, frame in enumerate(frames):
        if frame.pose is None:
            raise DataError("cannot export a frame without a pose")
        write_png(frame.image, root / "frames" / f"{i:06d}.png")
        lines.append(format_pose_line(frame.pose))
        if write_gt_depth and frame.gt_depth is not None:
            (root / "gt_depth").mkdir(exist_ok=True)
            np.save(root / "gt_depth" / f"{i:06d}.npy", frame.gt_depth)
    tmp = root / "traj.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, root / "traj.txt")


# --- synthetic oracle scene ---------------------------------------------------


@dataclass(frozen=True)
class TexturedBox:
    """Axis-aligned solid box, meters."""

    min: tuple[float, float, float]
    max: tuple[float, float, float]


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """A closed textured room with box obstacles and an inside orbit camera.

    Every face carries a deterministic two-color linear-ramp checker
    texture whose palette is drawn from the generator passed to
    synth_scene, so identical (spec, seed) pairs produce identical frames.
    """

    room_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    room_max: tuple[float, float, float] = (4.0, 4.0, 3.0)
    boxes: tuple[TexturedBox, ...] = ()
    checker_period: float = 0.5  # meters
    orbit_radius: float = 1.0
    orbit_height: float = 1.5
    height_amplitude: float = 0.3
    orbit_turns: float = 1.0
    frame_count: int = 60
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(60.0, 60.0, 32.0, 32.0, 64, 64)
    )

    def __post_init__(self):
        lo = np.asarray(self.room_min, dtype=np.float64)
        hi = np.asarray(self.room_max, dtype=np.float64)
        if not np.all(lo < hi):
            raise ValueError("room_min must be strictly below room_max")
        for box in self.boxes:
            b_lo = np.asarray(box.min)
            b_hi = np.asarray(box.max)
            if not (np.all(b_lo < b_hi) and np.all(b_lo >= lo) and np.all(b_hi <= hi)):
                raise ValueError("boxes must be non-degenerate and inside the room")
        if self.frame_count < 1 or self.checker_period <= 0 or self.orbit_radius <= 0:
            raise ValueError("frame_count, checker_period, orbit_radius must be positive")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.room_min) + np.asarray(self.room_max))


def scene_bounds_for(spec: SyntheticSceneSpec, margin: float = 0.02) -> SceneBounds:
    """Field bounds: the room box inflated so wall geometry sits strictly inside."""
    lo = np.asarray(spec.room_min, dtype=np.float64)
    hi = np.asarray(spec.room_max, dtype=np.float64)
    pad = (hi - lo) * margin
    return SceneBounds(lo - pad, hi + pad)


def _face_palettes(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    """(n_solids * 6, 2, 3) palette pairs; solid 0 is the room."""
    n_faces = 6 * (1 + len(spec.boxes))
    return rng.uniform(0.15, 0.95, size=(n_faces, 2, 3))


def _face_color(spec, palettes, face_index, axis, hit_points):
    """Texture color at hit points (N, 3) on the face orthogonal to `axis`."""
    other = [a for a in range(3) if a != axis]
    p = hit_points[:, other[0]] / spec.checker_period
    q = hit_points[:, other[1]] / spec.checker_period
    checker = ((np.floor(p) + np.floor(q)) % 2.0)
    fp = p - np.floor(p)
    fq = q - np.floor(q)
    s = 0.5 * checker + 0.25 * fp + 0.25 * fq
    a = palettes[face_index, 0]
    b = palettes[face_index, 1]
    return a[None, :] + (b[None, :] - a[None, :]) * s[:, None]


def _orbit_pose(spec: SyntheticSceneSpec, k: int) -> Pose:
    angle = 2.0 * np.pi * spec.orbit_turns * k / spec.frame_count
    center = spec.center
    eye = np.array(
        [
            center[0] + spec.orbit_radius * np.cos(angle),
            center[1] + spec.orbit_radius * np.sin(angle),
            spec.orbit_height + spec.height_amplitude * np.sin(2.0 * angle),
        ]
    )
    forward = center - eye
    forward = forward / np.linalg.norm(forward)
    world_down = np.array([0.0, 0.0, -1.0])
    down = world_down - np.dot(world_down, forward) * forward
    n = np.linalg.norm(down)
    if n < 1e-9:
        down = np.array([0.0, -1.0, 0.0])
        n = 1.0
    down = down / n
    right = np.cross(down, forward)
    R = np.stack([right, down, forward], axis=1)
    return Pose.from_matrix(R, eye)


def _trace(spec: SyntheticSceneSpec, palettes, origin, dirs):
    """Analytic intersection of rays with the room interior and boxes.

    Returns (depth (N,), color (N, 3)); depth is the distance along the
    unit direction. Room walls are hit from inside (exit face of the box).
    """
    n = dirs.shape[0]
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    room_lo = np.asarray(spec.room_min, dtype=np.float64)
    room_hi = np.asarray(spec.room_max, dtype=np.float64)

    # inside-out hit: along each axis the wall ahead of the ray
    t_axis = np.where(
        safe > 0, (room_hi[None, :] - origin[None, :]) / safe, (room_lo[None, :] - origin[None, :]) / safe
    )
    room_axis = np.argmin(t_axis, axis=1)
    depth = t_axis[np.arange(n), room_axis]
    face = room_axis * 2 + (safe[np.arange(n), room_axis] > 0).astype(int)

    for b_i, box in enumerate(spec.boxes):
        lo = np.asarray(box.min, dtype=np.float64)
        hi = np.asarray(box.max, dtype=np.float64)
        t0 = (lo[None, :] - origin[None, :]) / safe
        t1 = (hi[None, :] - origin[None, :]) / safe
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        t_near = np.max(tmin, axis=1)
        t_far = np.min(tmax, axis=1)
        entry_axis = np.argmax(tmin, axis=1)
        hit = (t_near <= t_far) & (t_near > 1e-9) & (t_near < depth)
        depth = np.where(hit, t_near, depth)
        # the entry face is on the side the ray comes from
        box_face = (1 + b_i) * 6 + entry_axis * 2 + (safe[np.arange(n), entry_axis] < 0).astype(int)
        face = np.where(hit, box_face, face)

    points = origin[None, :] + depth[:, None] * dirs
    color = np.zeros((n, 3))
    for f in np.unique(face):
        m = face == f
        color[m] = _face_color(spec, palettes, int(f), int((f % 6) // 2), points[m])
    return depth, color


def synth_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[Frame]:
    """Render the analytic scene: exact depths, procedural textures, GT poses."""
    palettes = _face_palettes(spec, rng)
    intr = spec.intrinsics
    us, vs = np.meshgrid(
        np.arange(intr.width, dtype=np.float64) + 0.5,
        np.arange(intr.height, dtype=np.float64) + 0.5,
    )
    d_cam = np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1
    ).reshape(-1, 3)
    d_cam = d_cam / np.linalg.norm(d_cam, axis=1, keepdims=True)

    frames = []
    for k in range(spec.frame_count):
        pose = _orbit_pose(spec, k)
        dirs = d_cam @ pose.rotation_matrix().T
        depth, color = _trace(spec, palettes, pose.trans, dirs)
        image = np.clip(color, 0.0, 1.0).astype(np.float32).reshape(intr.height, intr.width, 3)
        gt = depth.reshape(intr.height, intr.width)
        frames.append(Frame(image, float(k), pose, gt))
    return frames


# --- point clouds and images ----------------------------------------------------


@dataclass
class ColoredPointCloud:
    """Positions (N, 3) float32 meters with (N, 3) uint8 colors."""

    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float32).reshape(-1, 3)
        col = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if pos.shape[0] != col.shape[0]:
            raise ValueError("positions and colors must have equal length")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        self.positions = pos
        self.colors = col

    def __len__(self) -> int:
        return self.positions.shape[0]

    @staticmethod
    def empty() -> "ColoredPointCloud":
        return ColoredPointCloud(np.zeros((0, 3), dtype=np.float32), np.zeros((0, 3), dtype=np.uint8))


def extract_pointcloud(
    grid: FactorizedGrid,
    dec: Decoder,
    views,
    intr: CameraIntrinsics,
    *,
    opacity_floor: float = 0.5,
    pixel_stride: int = 4,
    coarse_samples: int = 48,
    fine_samples: int = 48,
    mode: str = "occupancy",
) -> ColoredPointCloud:
    """Unproject confidently rendered pixels from each view into one cloud.

    Pixels whose rendered opacity clears the floor are lifted along their
    ray at the opacity-normalized depth; the merged cloud is deduplicated
    on a voxel lattice at half the grid cell size and clipped to bounds.
    """
    positions = []
    colors = []
    for pose in views:
        view = render_view(
            grid,
            dec,
            pose,
            intr,
            pixel_stride=pixel_stride,
            coarse_samples=coarse_samples,
            fine_samples=fine_samples,
            mode=mode,
        )
        keep = view.opacity >= opacity_floor
        if not np.any(keep):
            continue
        pts = view.origins[keep] + view.depth_normalized[keep, None] * view.dirs[keep]
        positions.append(pts)
        colors.append(np.clip(view.color[keep] * 255.0, 0, 255).astype(np.uint8))

    if not positions:
        return ColoredPointCloud.empty()
    pts = np.concatenate(positions, axis=0)
    col = np.concatenate(colors, axis=0)

    inside = np.all((pts >= grid.bounds.min) & (pts <= grid.bounds.max), axis=1)
    pts, col = pts[inside], col[inside]
    if pts.shape[0] == 0:
        return ColoredPointCloud.empty()

    voxel = grid.cell_size() * 0.5
    keys = np.floor((pts - grid.bounds.min) / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return ColoredPointCloud(pts[first].astype(np.float32), col[first])


def cloud_from_depth(frames, intr: CameraIntrinsics, *, pixel_stride: int = 2) -> ColoredPointCloud:
    """Ground-truth surface samples from frames that carry gt_depth."""
    positions = []
    colors = []
    us, vs = np.meshgrid(
        np.arange(0, intr.width, pixel_stride, dtype=np.float64) + 0.5,
        np.arange(0, intr.height, pixel_stride, dtype=np.float64) + 0.5,
    )
    d_cam = np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1
    ).reshape(-1, 3)
    d_cam = d_cam / np.linalg.norm(d_cam, axis=1, keepdims=True)
    for frame in frames:
        if frame.gt_depth is None or frame.pose is None:
            continue
        depth = frame.gt_depth[::pixel_stride, ::pixel_stride].reshape(-1)
        ok = np.isfinite(depth)
        dirs = d_cam @ frame.pose.rotation_matrix().T
        pts = frame.pose.trans[None, :] + depth[ok, None] * dirs[ok]
        rgb = frame.image[::pixel_stride, ::pixel_stride].reshape(-1, 3)[ok]
        positions.append(pts)
        colors.append(np.clip(rgb * 255.0, 0, 255).astype(np.uint8))
    if not positions:
        return ColoredPointCloud.empty()
    return ColoredPointCloud(
        np.concatenate(positions).astype(np.float32), np.concatenate(colors)
    )


def write_ply(cloud: ColoredPointCloud, path) -> None:
    """ASCII PLY with x y z float and red green blue uchar properties."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    body = [
        f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g} {c[0]} {c[1]} {c[2]}"
        for p, c in zip(cloud.positions, cloud.colors)
    ]
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines + body) + "\n")
    os.replace(tmp, path)


def read_ply(path) -> ColoredPointCloud:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    text = path.read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise DataError(f"{path}: not a PLY file")
    n = None
    header_end = None
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.strip() == "end_header":
            header_end = i
            break
    if n is None or header_end is None:
        raise DataError(f"{path}: malformed PLY header")
    pos = np.zeros((n, 3), dtype=np.float32)
    col = np.zeros((n, 3), dtype=np.uint8)
    for j in range(n):
        parts = text[header_end + 1 + j].split()
        pos[j] = [float(p) for p in parts[0:3]]
        col[j] = [int(p) for p in parts[3:6]]
    return ColoredPointCloud(pos, col)


def write_png(image: np.ndarray, path) -> None:
    """8-bit RGB (or grayscale for 2-D input), clamped from [0, 1]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    tmp = str(path) + ".tmp"
    Image.fromarray(data, mode=mode).save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path) -> np.ndarray:
    return _load_image(Path(path))
