"""Losses, mapping-uncertainty diagnostics, gradients, and the optimizer.

The training objective is
``total = color_weight * color_loss + warp_weight * warping_loss``:
a summed squared photometric error on rendered pixels plus a cross-frame
consistency term that lifts each pixel to 3D with its rendered depth and
compares it against bilinear lookups in every partner frame.

The Mahalanobis diagnostic measures the same photometric gap under a
diagonal noise covariance; averaged over cached windows it splits into an
initialization share and an on-the-fly share.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DivergenceError
from .geometry import CameraIntrinsics, camera_to_pixel, world_to_camera

logger = logging.getLogger(__name__)

__all__ = [
    "LossWeights",
    "CovarianceModel",
    "color_loss",
    "bilinear_image_sample",
    "warping_loss",
    "total_loss",
    "mahalanobis",
    "global_uncertainty",
    "compute_gradients",
    "make_optimizer",
    "StepLogger",
]

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights for the color and warping terms."""

    color: float = 1.0
    warp: float = 0.5

    def __post_init__(self):
        if self.color < 0 or self.warp < 0:
            raise ValueError("loss weights must be non-negative")
        if self.color + self.warp <= 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class CovarianceModel:
    """Diagonal per-pixel noise covariance; scalar means isotropic."""

    variance: float | np.ndarray = 1.0

    def __post_init__(self):
        v = np.asarray(self.variance, dtype=np.float64)
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "variance", v)


def color_loss(rendered: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
    """Sum of squared per-channel differences over the batch."""
    if rendered.shape != observed.shape:
        raise ValueError(f"shape mismatch {tuple(rendered.shape)} vs {tuple(observed.shape)}")
    return ((rendered - observed) ** 2).sum()


def bilinear_image_sample(images: torch.Tensor, frame_idx: torch.Tensor, uv: torch.Tensor):
    """Bilinear color lookup at continuous pixel coordinates.

    images (F, H, W, 3); frame_idx (M,) long; uv (M, 2) with the
    pixel-center convention (integer pixel (u, v) sits at (u+.5, v+.5)).
    Coordinates must satisfy 0.5 <= u <= W-0.5 (same for v).
    """
    _, H, W, _ = images.shape
    x = (uv[..., 0] - 0.5).clamp(0, W - 1)
    y = (uv[..., 1] - 0.5).clamp(0, H - 1)
    x0 = x.floor().long().clamp(0, W - 2)
    y0 = y.floor().long().clamp(0, H - 2)
    fx = (x - x0.to(x.dtype)).unsqueeze(-1)
    fy = (y - y0.to(y.dtype)).unsqueeze(-1)
    i00 = images[frame_idx, y0, x0]
    i10 = images[frame_idx, y0, x0 + 1]
    i01 = images[frame_idx, y0 + 1, x0]
    i11 = images[frame_idx, y0 + 1, x0 + 1]
    return (
        i00 * (1 - fx) * (1 - fy)
        + i10 * fx * (1 - fy)
        + i01 * (1 - fx) * fy
        + i11 * fx * fy
    )


def warping_loss(
    images: torch.Tensor,
    rotations: torch.Tensor,
    translations: torch.Tensor,
    intr: CameraIntrinsics,
    frame_idx: torch.Tensor,
    pixels_uv: torch.Tensor,
    depths: torch.Tensor,
):
    """Cross-frame photometric consistency through rendered depth.

    images (F, H, W, 3) are the cached window frames; rotations (F, 3, 3)
    and translations (F, 3) their camera-to-world poses (may carry
    gradients); frame_idx (B,) names the source frame per sampled pixel;
    pixels_uv (B, 2) are pixel-center coordinates; depths (B,) the rendered
    distances along each pixel ray.

    Each pixel is lifted to X = origin + depth * direction and projected
    into every other frame; out-of-frustum projections are masked. Returns
    (loss, valid_pairs): the mean squared color residual over valid pairs,
    or 0 with valid_pairs == 0 when nothing projects anywhere.
    """
    F_, H, W, _ = images.shape
    if F_ < 2:
        raise ValueError("warping needs at least two frames")

    dirs_cam = torch.stack(
        [
            (pixels_uv[:, 0] - intr.cx) / intr.fx,
            (pixels_uv[:, 1] - intr.cy) / intr.fy,
            torch.ones_like(pixels_uv[:, 0]),
        ],
        dim=-1,
    )
    dirs_cam = dirs_cam / dirs_cam.norm(dim=-1, keepdim=True)
    R_src = rotations[frame_idx]
    dirs_world = (R_src @ dirs_cam.unsqueeze(-1)).squeeze(-1)
    points = translations[frame_idx] + depths.unsqueeze(-1) * dirs_world  # (B, 3)

    p_cam = world_to_camera(rotations, translations, points)  # (F, B, 3)
    uv, z = camera_to_pixel(intr, p_cam)

    B = points.shape[0]
    arange_f = torch.arange(F_, device=points.device).unsqueeze(-1)
    not_self = arange_f != frame_idx.unsqueeze(0)
    valid = (
        (z > 1e-6)
        & (uv[..., 0] >= 0.5)
        & (uv[..., 0] <= W - 0.5)
        & (uv[..., 1] >= 0.5)
        & (uv[..., 1] <= H - 0.5)
        & not_self
    )

    src_u = pixels_uv[:, 0].long().clamp(0, W - 1)
    src_v = pixels_uv[:, 1].long().clamp(0, H - 1)
    ref = images[frame_idx, src_v, src_u]  # (B, 3), constant targets

    flat_frames = arange_f.expand(F_, B).reshape(-1)
    uv_safe = torch.where(valid.unsqueeze(-1), uv, torch.full_like(uv, 0.5))
    warped = bilinear_image_sample(images, flat_frames, uv_safe.reshape(-1, 2)).reshape(F_, B, 3)

    residual = ((warped - ref.unsqueeze(0)) ** 2).sum(dim=-1)
    residual = torch.where(valid, residual, torch.zeros_like(residual))
    n_valid = int(valid.sum())
    if n_valid == 0:
        logger.warning("warping loss: no valid cross-frame pairs in this batch")
        return depths.sum() * 0.0, 0
    return residual.sum() / n_valid, n_valid


def total_loss(color: torch.Tensor, warp: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    return weights.color * color + weights.warp * warp


def mahalanobis(rendered, observed, cov: CovarianceModel | None = None) -> float:
    """Quadratic-form photometric gap (m' - I)^T Q^{-1} (m' - I), diagonal Q."""
    m = np.asarray(rendered, dtype=np.float64)
    i = np.asarray(observed, dtype=np.float64)
    if m.shape != i.shape:
        raise ValueError("rendered/observed shapes differ")
    var = cov.variance if cov is not None else np.asarray(1.0)
    diff2 = (m - i) ** 2
    if var.ndim == 0:
        return float(diff2.sum() / float(var))
    if var.shape != diff2.shape[: var.ndim]:
        raise ValueError("covariance diagonal does not broadcast over residuals")
    return float((diff2 / var.reshape(var.shape + (1,) * (diff2.ndim - var.ndim))).sum())


def global_uncertainty(window_distances, w: int):
    """Monte-Carlo split of mapping uncertainty into init and on-the-fly parts.

    Returns (total, init_share, fly_share); each is the per-window distance
    sum scaled by 1/w, with the first window attributed to initialization.
    """
    if w < 1:
        raise ValueError("window size must be >= 1")
    d = [float(x) for x in window_distances]
    if not d:
        raise ValueError("need at least one window distance")
    init_share = d[0] / w
    fly_share = float(sum(d[1:])) / w
    return init_share + fly_share, init_share, fly_share


def compute_gradients(loss: torch.Tensor, parameters):
    """Reverse-mode gradients of a scalar loss; aborts on non-finite values."""
    params = list(parameters)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise DivergenceError("non-finite gradient; step aborted")
        out.append(g)
    return out


def make_optimizer(
    grid_params,
    decoder_params=None,
    pose_params=None,
    *,
    grid_lr: float = 0.02,
    decoder_lr: float = 0.001,
    pose_lr: float = 1e-3,
) -> torch.optim.Adam:
    """Adam with per-group learning rates (grid / decoder / poses)."""
    groups = [{"params": list(grid_params), "lr": grid_lr, "name": "grid"}]
    if decoder_params is not None:
        groups.append({"params": list(decoder_params), "lr": decoder_lr, "name": "decoder"})
    if pose_params is not None:
        groups.append({"params": list(pose_params), "lr": pose_lr, "name": "poses"})
    return torch.optim.Adam(groups, betas=ADAM_BETAS, eps=ADAM_EPS)


class StepLogger:
    """Appends one CSV row per optimization step.

    Columns: step, color_loss, warp_loss, total_loss, mapping_distance,
    psnr_db. A single header row is written when the file is created.
    """

    COLUMNS = ["step", "color_loss", "warp_loss", "total_loss", "mapping_distance", "psnr_db"]

    def __init__(self, path):
        self.path = str(path)
        new = not os.path.exists(self.path)
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if new:
            self._writer.writerow(self.COLUMNS)
            self._fh.flush()

    def append(self, step, color, warp, total, mapping_distance, psnr_db):
        self._writer.writerow(
            [
                step,
                f"{color:.8f}",
                f"{warp:.8f}",
                f"{total:.8f}",
                f"{mapping_distance:.8f}",
                f"{psnr_db:.4f}",
            ]
        )
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
