"""Two-stage incremental mapping.

Initialization collects 15 frames and jointly optimizes the grid, the
color decoder, and (for frames that arrive without poses) camera poses,
while the per-ray sample sets go through the four-iteration schedule:
one stratified pass of 32 samples, then three sliding-window refinements
of 64 samples each with kernel sizes 3, 4, and 5. Optimization steps are
split evenly across the four sampler iterations and sample sets only ever
grow.

Afterwards the decoder is frozen and the map alone is updated: every 5
incoming frames form the new local segment of a 20-frame active window
(5 newest locals plus keyframes picked by uniform stride), and 20 Adam
iterations over random pixel batches refine the grid.

One logical thread owns all state mutation; rendering fan-out happens
inside torch ops. All randomness flows from the numpy generator handed
in by the caller.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import data as data_mod
from .errors import DataError, DivergenceError
from .field import Decoder, FactorizedGrid
from .geometry import CameraIntrinsics, Pose, quat_to_axis_angle, ray_aabb_range, so3_exp
from .metrics import psnr
from .objective import (
    CovarianceModel,
    LossWeights,
    StepLogger,
    color_loss,
    global_uncertainty,
    mahalanobis,
    make_optimizer,
    total_loss,
    warping_loss,
)
from .render import render_rays, render_view
from .sampler import RaySamples, invert_cdf_batch, sliding_window_sample, stratified, stratified_batch

logger = logging.getLogger(__name__)

__all__ = [
    "WindowFrame",
    "FrameWindow",
    "KeyframeSet",
    "ScheduleConfig",
    "SamplerSettings",
    "OptimSettings",
    "MapState",
    "InitResult",
    "UpdateStats",
    "RunResult",
    "DirectorySink",
    "initialize",
    "select_window",
    "advance_window",
    "map_update",
    "run_sequence",
]


@dataclass(frozen=True)
class WindowFrame:
    """Training view of a frame: image + pose only, no ground truth."""

    frame_id: int
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    pose: Pose | None


@dataclass
class FrameWindow:
    """Active window: keyframe portion plus the newest local segment."""

    global_frames: list[WindowFrame]
    local_frames: list[WindowFrame]
    capacity: int

    def __post_init__(self):
        if len(self.frames) > self.capacity:
            raise ValueError("window exceeds capacity")
        ids = [f.frame_id for f in self.local_frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("local frame ids must be strictly increasing")

    @property
    def frames(self) -> list[WindowFrame]:
        seen = set()
        out = []
        for f in self.global_frames + self.local_frames:
            if f.frame_id not in seen:
                seen.add(f.frame_id)
                out.append(f)
        return out

    def __len__(self) -> int:
        return len(self.frames)


class KeyframeSet:
    """Frames retained globally, keyed by id."""

    def __init__(self):
        self._by_id: dict[int, WindowFrame] = {}

    def add(self, frame: WindowFrame) -> None:
        self._by_id[frame.frame_id] = frame

    def frames(self) -> list[WindowFrame]:
        return [self._by_id[i] for i in sorted(self._by_id)]

    def ids(self) -> list[int]:
        return sorted(self._by_id)

    def __contains__(self, frame_id: int) -> bool:
        return frame_id in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)


@dataclass(frozen=True)
class ScheduleConfig:
    """The mapping schedule; defaults follow the two-stage recipe."""

    init_frames: int = 15
    sampler_iters: int = 4
    sample_counts: tuple[int, ...] = (32, 64, 64, 64)
    window_kernels: tuple[int, ...] = (3, 4, 5)
    mix_ratio: float = 0.4
    active_window: int = 20
    iters_per_update: int = 20
    frames_per_update: int = 5
    rays_per_iter: int = 1024
    init_steps: int = 200
    init_rays_per_frame: int = 512
    keyframe_stride: int = 10
    coarse_samples: int = 32
    fine_samples: int = 32

    def __post_init__(self):
        if len(self.sample_counts) != self.sampler_iters:
            raise ValueError("sample_counts must have one entry per sampler iteration")
        if len(self.window_kernels) != self.sampler_iters - 1:
            raise ValueError("window_kernels must cover the sliding-window iterations")
        ints = (
            self.init_frames, self.sampler_iters, self.active_window,
            self.iters_per_update, self.frames_per_update, self.rays_per_iter,
            self.init_steps, self.init_rays_per_frame, self.keyframe_stride,
            self.coarse_samples, self.fine_samples,
        )
        if any(v < 1 for v in ints) or any(c < 1 for c in self.sample_counts):
            raise ValueError("schedule values must be positive")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must be in [0, 1]")


@dataclass(frozen=True)
class SamplerSettings:
    """Sliding-window sampler constants."""

    score_blend: float = 0.5
    quantile: float = 0.8
    gap_factor: float = 2.0
    pad_factor: float = 1.0


@dataclass(frozen=True)
class OptimSettings:
    grid_lr: float = 0.02
    decoder_lr: float = 0.001
    pose_lr: float = 1e-3


@dataclass
class MapState:
    """The evolving artifact: map, decoder, optimizer, and keyframes."""

    grid: FactorizedGrid
    decoder: Decoder
    optimizer: torch.optim.Adam
    keyframes: KeyframeSet
    decoder_frozen: bool = False
    frames_processed: int = 0
    update_history: list = dc_field(default_factory=list)

    @property
    def bounds(self):
        return self.grid.bounds


@dataclass
class InitResult:
    state: MapState
    poses: list[Pose]
    initial_loss: float
    final_loss: float
    mean_mapping_distance: float


@dataclass(frozen=True)
class UpdateStats:
    last_frame_id: int
    mean_total_loss: float
    mean_mapping_distance: float
    skipped_iters: int
    duration_s: float


@dataclass
class RunResult:
    state: MapState
    init_poses: list[Pose]
    updates: list[UpdateStats]
    uncertainty_total: float
    uncertainty_init: float
    uncertainty_fly: float


# --- internal helpers ---------------------------------------------------------


def _pixel_dirs_cam(intr: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    d = np.stack(
        [(uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy, np.ones(uv.shape[0])],
        axis=-1,
    )
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class _PoseParams:
    """Per-frame pose tensors; frames without a pose become leaves."""

    def __init__(self, frames: Sequence[WindowFrame], dtype: torch.dtype):
        self.dtype = dtype
        self.entries = []
        prev = Pose.identity()
        for i, f in enumerate(frames):
            pose = f.pose if f.pose is not None else None
            if i == 0 and pose is None:
                pose = Pose.identity()
            if pose is not None:
                R = torch.as_tensor(pose.rotation_matrix(), dtype=dtype)
                t = torch.as_tensor(pose.trans, dtype=dtype)
                self.entries.append(("fixed", R, t, pose))
                prev = pose
            else:
                w = torch.tensor(quat_to_axis_angle(prev.quat), dtype=dtype, requires_grad=True)
                v = torch.tensor(prev.trans.copy(), dtype=dtype, requires_grad=True)
                self.entries.append(("free", w, v, None))

    def parameters(self):
        out = []
        for kind, a, b, _ in self.entries:
            if kind == "free":
                out.extend([a, b])
        return out

    def stacked(self):
        Rs, ts = [], []
        for kind, a, b, _ in self.entries:
            if kind == "fixed":
                Rs.append(a)
                ts.append(b)
            else:
                Rs.append(so3_exp(a))
                ts.append(b)
        return torch.stack(Rs), torch.stack(ts)

    def current_poses(self) -> list[Pose]:
        out = []
        for kind, a, b, original in self.entries:
            if kind == "fixed":
                out.append(original)
            else:
                with torch.no_grad():
                    R = so3_exp(a).numpy().astype(np.float64)
                out.append(Pose.from_matrix(R, b.detach().numpy().astype(np.float64)))
        return out


@dataclass
class _RayPool:
    frame_idx: np.ndarray
    uv: np.ndarray
    observed: np.ndarray
    near: np.ndarray
    far: np.ndarray
    samples: list[RaySamples]

    def __len__(self):
        return self.frame_idx.size


def _build_pool(frames, intr, bounds, schedule, rng) -> _RayPool:
    H, W = frames[0].image.shape[:2]
    n_per = min(schedule.init_rays_per_frame, H * W)
    fidx, uvs, cols = [], [], []
    for i, f in enumerate(frames):
        flat = rng.choice(H * W, size=n_per, replace=False)
        u = (flat % W).astype(np.float64) + 0.5
        v = (flat // W).astype(np.float64) + 0.5
        fidx.append(np.full(n_per, i, dtype=np.int64))
        uvs.append(np.stack([u, v], axis=-1))
        cols.append(f.image.reshape(-1, 3)[flat])
    frame_idx = np.concatenate(fidx)
    uv = np.concatenate(uvs)
    observed = np.concatenate(cols)

    guesses = []
    prev = Pose.identity()
    for f in frames:
        prev = f.pose if f.pose is not None else prev
        guesses.append(prev)
    d_cam = _pixel_dirs_cam(intr, uv)
    dirs = np.einsum("nij,nj->ni", np.stack([guesses[i].rotation_matrix() for i in frame_idx]), d_cam)
    origins = np.stack([guesses[i].trans for i in frame_idx])
    near, far = ray_aabb_range(origins, dirs, bounds.min, bounds.max)
    far = np.maximum(far, near + 1e-3)

    samples = [
        RaySamples(stratified(near[i], far[i], schedule.sample_counts[0], rng), near[i], far[i])
        for i in range(frame_idx.size)
    ]
    return _RayPool(frame_idx, uv, observed, near, far, samples)


def _pad_samples(samples: Sequence[RaySamples], idx) -> tuple[np.ndarray, np.ndarray]:
    chosen = [samples[i] for i in idx]
    lens = np.array([len(s) for s in chosen])
    n_max = int(lens.max())
    t = np.empty((len(chosen), n_max))
    mask = np.zeros((len(chosen), n_max), dtype=bool)
    for r, s in enumerate(chosen):
        t[r, : lens[r]] = s.t
        t[r, lens[r]:] = s.t[-1]
        mask[r, : lens[r]] = True
    return t, mask


def _render_pool(grid, dec, intr, pool, idx, rotations, translations, mode, *, grad: bool):
    dtype = grid.dtype
    fi = pool.frame_idx[idx]
    uv = pool.uv[idx]
    t_pad, mask = _pad_samples(pool.samples, idx)

    uv_t = torch.as_tensor(uv, dtype=dtype)
    d_cam = torch.stack(
        [
            (uv_t[:, 0] - intr.cx) / intr.fx,
            (uv_t[:, 1] - intr.cy) / intr.fy,
            torch.ones_like(uv_t[:, 0]),
        ],
        dim=-1,
    )
    d_cam = d_cam / d_cam.norm(dim=-1, keepdim=True)
    fi_t = torch.as_tensor(fi)
    R = rotations[fi_t]
    dirs = (R @ d_cam.unsqueeze(-1)).squeeze(-1)
    origins = translations[fi_t]
    t_t = torch.as_tensor(t_pad, dtype=dtype)
    mask_t = torch.as_tensor(mask)
    if grad:
        out = render_rays(grid, dec, origins, dirs, t_t, mask_t, mode=mode)
    else:
        with torch.no_grad():
            out = render_rays(grid, dec, origins, dirs, t_t, mask_t, mode=mode)
    return out, (fi_t, uv_t, mask)


def initialize(
    frames: Sequence[WindowFrame],
    grid: FactorizedGrid,
    decoder: Decoder,
    intr: CameraIntrinsics,
    schedule: ScheduleConfig,
    sampler_cfg: SamplerSettings,
    weights: LossWeights,
    optim_cfg: OptimSettings,
    rng: np.random.Generator,
    *,
    render_mode: str = "occupancy",
    noise_variance: float = 1.0,
    step_logger: StepLogger | None = None,
) -> InitResult:
    """Joint bootstrap of map, decoder, and missing poses on the first frames.

    Frames that already carry poses keep them bit-exactly; frames without
    are optimized (frame 0 defaults to the identity and stays fixed).
    """
    if len(frames) != schedule.init_frames:
        raise ValueError(f"initialization needs exactly {schedule.init_frames} frames, got {len(frames)}")
    frames = list(frames)
    pose_params = _PoseParams(frames, grid.dtype)
    images_t = torch.as_tensor(
        np.stack([f.image for f in frames]).astype(np.float64), dtype=grid.dtype
    )
    cov = CovarianceModel(noise_variance)

    pool = _build_pool(frames, intr, grid.bounds, schedule, rng)
    observed_t = torch.as_tensor(pool.observed.astype(np.float64), dtype=grid.dtype)

    optimizer = make_optimizer(
        grid.parameters(),
        decoder.parameters(),
        pose_params.parameters() or None,
        grid_lr=optim_cfg.grid_lr,
        decoder_lr=optim_cfg.decoder_lr,
        pose_lr=optim_cfg.pose_lr,
    )

    base, extra = divmod(schedule.init_steps, schedule.sampler_iters)
    stage_steps = [base + (1 if s < extra else 0) for s in range(schedule.sampler_iters)]
    rays_per_iter = min(schedule.rays_per_iter, len(pool))

    initial_loss = None
    final_loss = None
    distances = []
    step = 0
    for stage in range(schedule.sampler_iters):
        if stage > 0:
            _refresh_pool_samples(
                grid, decoder, intr, pool, pose_params, schedule, sampler_cfg, rng,
                stage=stage, mode=render_mode,
            )
        for _ in range(stage_steps[stage]):
            if rays_per_iter == len(pool):
                idx = np.arange(len(pool))
            else:
                idx = rng.choice(len(pool), size=rays_per_iter, replace=False)
            rotations, translations = pose_params.stacked()
            out, (fi_t, uv_t, _) = _render_pool(
                grid, decoder, intr, pool, idx, rotations, translations, render_mode, grad=True
            )
            target = observed_t[torch.as_tensor(idx)]
            lc = color_loss(out.color, target)
            lw, _ = warping_loss(images_t, rotations, translations, intr, fi_t, uv_t, out.depth)
            loss = total_loss(lc, lw, weights)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"initialization diverged at stage {stage} step {step}: "
                    f"color={float(lc)!r} warp={float(lw)!r}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            loss_f = float(loss)
            if initial_loss is None:
                initial_loss = loss_f
            final_loss = loss_f
            d_m = mahalanobis(out.color.detach().numpy(), target.numpy(), cov)
            distances.append(d_m)
            if step_logger is not None:
                mse = float(((out.color.detach() - target) ** 2).mean())
                step_logger.append(step, float(lc), float(lw), loss_f, d_m, psnr_from_mse(mse))
            step += 1

    poses = pose_params.current_poses()
    keyframes = KeyframeSet()
    keyframes.add(WindowFrame(frames[0].frame_id, frames[0].image, poses[0]))

    for p in decoder.parameters():
        p.requires_grad_(False)
    fly_optimizer = make_optimizer(grid.parameters(), grid_lr=optim_cfg.grid_lr)
    state = MapState(
        grid=grid,
        decoder=decoder,
        optimizer=fly_optimizer,
        keyframes=keyframes,
        decoder_frozen=True,
        frames_processed=len(frames),
    )
    mean_d = float(np.mean(distances)) if distances else 0.0
    return InitResult(state, poses, initial_loss or 0.0, final_loss or 0.0, mean_d)


def _refresh_pool_samples(grid, dec, intr, pool, pose_params, schedule, sampler_cfg, rng, *, stage, mode):
    """Sliding-window refinement of every pool ray using current weights."""
    with torch.no_grad():
        rotations, translations = pose_params.stacked()
    count = schedule.sample_counts[stage]
    kernel = schedule.window_kernels[stage - 1]
    chunk = 4096
    for lo in range(0, len(pool), chunk):
        idx = np.arange(lo, min(lo + chunk, len(pool)))
        out, (_, _, mask) = _render_pool(
            grid, dec, intr, pool, idx, rotations, translations, mode, grad=False
        )
        w = out.weights.numpy()
        for r, i in enumerate(idx):
            valid = mask[r]
            new_samples, _, _ = sliding_window_sample(
                pool.samples[i],
                w[r][valid],
                count,
                rng,
                mix_ratio=schedule.mix_ratio,
                kernel_size=kernel,
                blend=sampler_cfg.score_blend,
                quantile=sampler_cfg.quantile,
                gap_factor=sampler_cfg.gap_factor,
                pad_factor=sampler_cfg.pad_factor,
            )
            pool.samples[i] = new_samples


def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return 99.0
    return min(99.0, -10.0 * float(np.log10(mse)))


def select_window(keyframes: KeyframeSet, locals_: Sequence[WindowFrame], schedule: ScheduleConfig) -> FrameWindow:
    """5 newest locals plus keyframes chosen by uniform stride, deduplicated."""
    if len(keyframes) < 1:
        raise ValueError("need at least one keyframe")
    locals_ = list(locals_)[-schedule.frames_per_update:]
    local_ids = {f.frame_id for f in locals_}
    candidates = [f for f in keyframes.frames() if f.frame_id not in local_ids]
    n_globals = schedule.active_window - len(locals_)
    if len(candidates) <= n_globals:
        chosen = candidates
    else:
        k = len(candidates)
        picks = [int(np.floor(j * k / n_globals)) for j in range(n_globals)]
        chosen = [candidates[p] for p in sorted(set(picks))]
    return FrameWindow(chosen, locals_, schedule.active_window)


def advance_window(
    window: FrameWindow,
    new_frames: Sequence[WindowFrame],
    keyframes: KeyframeSet,
    schedule: ScheduleConfig,
) -> FrameWindow:
    """Rotate the local segment by the incoming frames and reselect globals."""
    new_frames = list(new_frames)
    if not 1 <= len(new_frames) <= schedule.frames_per_update:
        raise ValueError(
            f"expected 1..{schedule.frames_per_update} new frames, got {len(new_frames)}"
        )
    locals_ = (window.local_frames + new_frames)[-schedule.frames_per_update:]
    return select_window(keyframes, locals_, schedule)


def map_update(
    state: MapState,
    window: FrameWindow,
    schedule: ScheduleConfig,
    weights: LossWeights,
    rng: np.random.Generator,
    intr: CameraIntrinsics,
    *,
    render_mode: str = "occupancy",
    noise_variance: float = 1.0,
    step_logger: StepLogger | None = None,
    step_offset: int = 0,
) -> MapState:
    """One on-the-fly update: fixed iterations of grid-only optimization."""
    if not state.decoder_frozen:
        raise ValueError("map_update requires a frozen decoder (run initialize first)")
    frames = window.frames
    if any(f.pose is None for f in frames):
        raise ValueError("all window frames need poses for map updates")

    grid, dec = state.grid, state.decoder
    dtype = grid.dtype
    images_np = np.stack([f.image for f in frames])
    images_t = torch.as_tensor(images_np.astype(np.float64), dtype=dtype)
    R_np = np.stack([f.pose.rotation_matrix() for f in frames])
    t_np = np.stack([f.pose.trans for f in frames])
    rotations = torch.as_tensor(R_np, dtype=dtype)
    translations = torch.as_tensor(t_np, dtype=dtype)
    cov = CovarianceModel(noise_variance)
    H, W = images_np.shape[1:3]

    t_start = time.perf_counter()
    consecutive_bad = 0
    skipped = 0
    losses = []
    distances = []
    for it in range(schedule.iters_per_update):
        fi = rng.integers(0, len(frames), size=schedule.rays_per_iter)
        flat = rng.integers(0, H * W, size=schedule.rays_per_iter)
        u = (flat % W).astype(np.float64) + 0.5
        v = (flat // W).astype(np.float64) + 0.5
        uv = np.stack([u, v], axis=-1)
        observed = images_np[fi, flat // W, flat % W]

        d_cam = _pixel_dirs_cam(intr, uv)
        dirs_np = np.einsum("nij,nj->ni", R_np[fi], d_cam)
        origins_np = t_np[fi]
        near, far = ray_aabb_range(origins_np, dirs_np, grid.bounds.min, grid.bounds.max)
        far = np.maximum(far, near + 1e-3)

        t_coarse = stratified_batch(near, far, schedule.coarse_samples, rng)
        o_t = torch.as_tensor(origins_np, dtype=dtype)
        d_t = torch.as_tensor(dirs_np, dtype=dtype)
        with torch.no_grad():
            coarse = render_rays(grid, dec, o_t, d_t, torch.as_tensor(t_coarse, dtype=dtype), mode=render_mode)
        w_coarse = coarse.weights.numpy().astype(np.float64) + 1e-12
        t_fine = invert_cdf_batch(
            t_coarse, w_coarse, near, far, rng.random((schedule.rays_per_iter, schedule.fine_samples))
        )
        t_all = np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)

        out = render_rays(grid, dec, o_t, d_t, torch.as_tensor(t_all, dtype=dtype), mode=render_mode)
        target = torch.as_tensor(observed.astype(np.float64), dtype=dtype)
        lc = color_loss(out.color, target)
        lw, _ = warping_loss(
            images_t, rotations, translations, intr,
            torch.as_tensor(fi), torch.as_tensor(uv, dtype=dtype), out.depth,
        )
        loss = total_loss(lc, lw, weights)
        if not torch.isfinite(loss):
            skipped += 1
            consecutive_bad += 1
            logger.warning("map_update: non-finite loss at iteration %d, skipping", it)
            if consecutive_bad >= 3:
                raise DivergenceError("three consecutive non-finite losses during map update")
            state.optimizer.zero_grad()
            continue
        consecutive_bad = 0
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()

        loss_f = float(loss)
        losses.append(loss_f)
        d_m = mahalanobis(out.color.detach().numpy(), observed, cov)
        distances.append(d_m)
        if step_logger is not None:
            mse = float(((out.color.detach() - target) ** 2).mean())
            step_logger.append(step_offset + it, float(lc), float(lw), loss_f, d_m, psnr_from_mse(mse))

    state.update_history.append(
        UpdateStats(
            last_frame_id=frames[-1].frame_id,
            mean_total_loss=float(np.mean(losses)) if losses else float("nan"),
            mean_mapping_distance=float(np.mean(distances)) if distances else float("nan"),
            skipped_iters=skipped,
            duration_s=time.perf_counter() - t_start,
        )
    )
    return state


def training_view(frame, frame_id: int) -> WindowFrame:
    """Strip a dataset frame down to what the mapper may see."""
    return WindowFrame(frame_id, frame.image, frame.pose)


class DirectorySink:
    """Writes snapshot artifacts under out_dir/snap_{frame:06d}/."""

    def __init__(
        self,
        out_dir,
        intr: CameraIntrinsics,
        *,
        view_stride: int = 10,
        pixel_stride: int = 4,
        opacity_floor: float = 0.5,
        mode: str = "occupancy",
        depth_scale: float | None = None,
    ):
        self.out_dir = Path(out_dir)
        self.intr = intr
        self.view_stride = view_stride
        self.pixel_stride = pixel_stride
        self.opacity_floor = opacity_floor
        self.mode = mode
        self.depth_scale = depth_scale

    def on_snapshot(self, mark: int, state: MapState, latest: WindowFrame, trajectory):
        snap = self.out_dir / f"snap_{mark:06d}"
        snap.mkdir(parents=True, exist_ok=True)
        views = [p for i, p in trajectory if i % self.view_stride == 0]
        if not views:
            views = [trajectory[-1][1]]
        cloud = data_mod.extract_pointcloud(
            state.grid, state.decoder, views, self.intr,
            opacity_floor=self.opacity_floor, pixel_stride=self.pixel_stride, mode=self.mode,
        )
        data_mod.write_ply(cloud, snap / "cloud.ply")

        view = render_view(state.grid, state.decoder, latest.pose, self.intr, mode=self.mode)
        data_mod.write_png(view.color_image(), snap / f"rgb_{latest.frame_id:06d}.png")
        scale = self.depth_scale if self.depth_scale is not None else state.grid.bounds.diameter
        data_mod.write_png(
            np.clip(view.depth_image() / scale, 0.0, 1.0), snap / f"depth_{latest.frame_id:06d}.png"
        )
        view_psnr = psnr(view.color_image(), latest.image)
        with open(snap / "metrics.csv", "w") as f:
            f.write("frame,points,view_psnr_db,mean_opacity\n")
            f.write(f"{mark},{len(cloud)},{view_psnr:.4f},{float(view.opacity.mean()):.6f}\n")


def run_sequence(
    frames: Iterable,
    grid: FactorizedGrid,
    decoder: Decoder,
    intr: CameraIntrinsics,
    schedule: ScheduleConfig,
    sampler_cfg: SamplerSettings,
    weights: LossWeights,
    optim_cfg: OptimSettings,
    rng: np.random.Generator,
    *,
    render_mode: str = "occupancy",
    noise_variance: float = 1.0,
    snapshot_every: int = 0,
    sink: DirectorySink | None = None,
    step_logger: StepLogger | None = None,
) -> RunResult:
    """Initialize on the first frames, then update the map every few frames.

    `frames` yields dataset frames (anything with .image and .pose); a
    final partial group smaller than frames_per_update is still processed.
    """
    it = iter(frames)
    init_frames = []
    for frame in it:
        init_frames.append(training_view(frame, len(init_frames)))
        if len(init_frames) == schedule.init_frames:
            break
    if len(init_frames) < schedule.init_frames:
        raise DataError(
            f"dataset yields {len(init_frames)} frames; initialization needs {schedule.init_frames}"
        )

    init = initialize(
        init_frames, grid, decoder, intr, schedule, sampler_cfg, weights, optim_cfg, rng,
        render_mode=render_mode, noise_variance=noise_variance, step_logger=step_logger,
    )
    state = init.state
    posed_init = [
        WindowFrame(f.frame_id, f.image, p) for f, p in zip(init_frames, init.poses)
    ]
    trajectory = [(f.frame_id, f.pose) for f in posed_init]
    for f in posed_init:
        if f.frame_id % schedule.keyframe_stride == 0:
            state.keyframes.add(f)

    locals_ = posed_init[-schedule.frames_per_update:]
    window = select_window(state.keyframes, locals_, schedule)
    step_counter = schedule.init_steps

    def emit_snapshots(before: int, after: int):
        if snapshot_every <= 0 or sink is None:
            return
        mark = (before // snapshot_every + 1) * snapshot_every
        while mark <= after:
            latest = window.local_frames[-1] if window.local_frames else posed_init[-1]
            sink.on_snapshot(mark, state, latest, trajectory)
            mark += snapshot_every

    emit_snapshots(0, state.frames_processed)

    next_id = schedule.init_frames
    group = []
    for frame in it:
        if frame.pose is None:
            raise DataError(f"frame {next_id}: on-the-fly mapping requires poses from the dataset")
        group.append(training_view(frame, next_id))
        next_id += 1
        if len(group) < schedule.frames_per_update:
            continue
        window, state, step_counter = _process_group(
            group, window, state, schedule, weights, rng, intr,
            render_mode, noise_variance, step_logger, step_counter, trajectory,
        )
        before = state.frames_processed - len(group)
        emit_snapshots(before, state.frames_processed)
        group = []

    if group:
        before = state.frames_processed
        window, state, step_counter = _process_group(
            group, window, state, schedule, weights, rng, intr,
            render_mode, noise_variance, step_logger, step_counter, trajectory,
        )
        emit_snapshots(before, state.frames_processed)

    window_distances = [init.mean_mapping_distance] + [
        u.mean_mapping_distance for u in state.update_history
    ]
    total, d_init, d_fly = global_uncertainty(window_distances, schedule.active_window)
    return RunResult(state, init.poses, list(state.update_history), total, d_init, d_fly)


def _process_group(
    group, window, state, schedule, weights, rng, intr,
    render_mode, noise_variance, step_logger, step_counter, trajectory,
):
    for f in group:
        trajectory.append((f.frame_id, f.pose))
        if f.frame_id % schedule.keyframe_stride == 0:
            state.keyframes.add(f)
    window = advance_window(window, group, state.keyframes, schedule)
    state = map_update(
        state, window, schedule, weights, rng, intr,
        render_mode=render_mode, noise_variance=noise_variance,
        step_logger=step_logger, step_offset=step_counter,
    )
    step_counter += schedule.iters_per_update
    state.frames_processed += len(group)
    return window, state, step_counter
