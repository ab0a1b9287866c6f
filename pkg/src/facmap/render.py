"""Differentiable volume rendering over the factorized field.

Per-sample occupancy (sigmoid of raw density) acts directly as opacity:
w_i = O_i * prod_{j<i} (1 - O_j). Color and depth are the weight-composited
sums of per-sample colors and distances. Depth is reported both raw
(exactly the weighted sum) and normalized by opacity; the normalized value
is for evaluation and extraction, never for the loss.

An exp-based compositing mode (alpha_i = 1 - exp(-relu(sigma_i) * delta_i))
is kept selectable for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .field import Decoder, FactorizedGrid, decode_color, occupancy, query_appearance, query_density
from .geometry import CameraIntrinsics, Pose, Ray, ray_aabb_range
from .sampler import invert_cdf_batch

__all__ = [
    "RenderResult",
    "RenderBatch",
    "ViewRender",
    "composite_weights",
    "render_color",
    "render_depth",
    "render_rays",
    "render_ray",
    "render_view",
]

DEFAULT_OPACITY_FLOOR = 0.1


@dataclass(frozen=True)
class RenderResult:
    """Single-ray render output (numpy views of the batch path)."""

    color: np.ndarray  # (3,) in [0, 1]
    depth: float  # meters, weighted sum of sample distances
    depth_normalized: float  # depth / opacity, 0 when opacity is 0
    weights: np.ndarray  # per-sample compositing weights
    opacity: float  # sum of weights
    low_confidence: bool  # opacity below the floor


@dataclass
class RenderBatch:
    """Batched render output; tensors stay on the autograd graph."""

    color: torch.Tensor  # (B, 3)
    depth: torch.Tensor  # (B,)
    depth_normalized: torch.Tensor  # (B,)
    weights: torch.Tensor  # (B, N)
    opacity: torch.Tensor  # (B,)
    low_confidence: torch.Tensor  # (B,) bool


def _check_sorted(t: torch.Tensor, mask: torch.Tensor | None):
    diffs = t[..., 1:] - t[..., :-1]
    if mask is not None:
        pair_ok = mask[..., 1:] & mask[..., :-1]
        diffs = torch.where(pair_ok, diffs, torch.zeros_like(diffs))
    if bool((diffs < 0).any()):
        raise ValueError("sample distances must be sorted ascending")


def composite_weights(occupancies: torch.Tensor, t: torch.Tensor | None = None) -> torch.Tensor:
    """w_i = O_i * prod_{j<i} (1 - O_j) along the last axis.

    If the sample distances t are supplied they are checked for ordering.
    """
    occ = occupancies if isinstance(occupancies, torch.Tensor) else torch.as_tensor(occupancies)
    if t is not None:
        _check_sorted(torch.as_tensor(t), None)
    ones = torch.ones_like(occ[..., :1])
    transmittance = torch.cumprod(torch.cat([ones, 1.0 - occ], dim=-1), dim=-1)[..., :-1]
    return occ * transmittance


def render_color(weights: torch.Tensor, colors: torch.Tensor) -> torch.Tensor:
    """Weighted sum of per-sample RGB: (..., N) x (..., N, 3) -> (..., 3)."""
    w = weights if isinstance(weights, torch.Tensor) else torch.as_tensor(np.asarray(weights, dtype=np.float64))
    c = colors if isinstance(colors, torch.Tensor) else torch.as_tensor(np.asarray(colors, dtype=np.float64))
    if w.shape != c.shape[:-1]:
        raise ValueError(f"weights {tuple(w.shape)} do not match colors {tuple(c.shape)}")
    return (w.unsqueeze(-1) * c).sum(dim=-2)


def render_depth(weights, t, opacity_floor: float = DEFAULT_OPACITY_FLOOR):
    """Weighted sum of sample distances plus a low-confidence flag.

    Returns (depth, low_confidence); the flag is set when the summed
    weights fall below opacity_floor.
    """
    w = weights if isinstance(weights, torch.Tensor) else torch.as_tensor(weights)
    tt = t if isinstance(t, torch.Tensor) else torch.as_tensor(np.asarray(t, dtype=np.float64))
    _check_sorted(tt, None)
    depth = (w * tt).sum(dim=-1)
    low = w.sum(dim=-1) < opacity_floor
    return depth, low


def render_rays(
    grid: FactorizedGrid,
    dec: Decoder,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    t: torch.Tensor,
    mask: torch.Tensor | None = None,
    *,
    mode: str = "occupancy",
    opacity_floor: float = DEFAULT_OPACITY_FLOOR,
) -> RenderBatch:
    """Render a batch of rays.

    origins/dirs (B, 3); t (B, N) sorted sample distances (pad entries
    allowed wherever mask is False; they must still be finite); mask (B, N)
    marks real samples. Differentiable w.r.t. grid, decoder, and any pose
    tensors upstream of origins/dirs.
    """
    if t.numel() == 0 or t.shape[-1] == 0:
        raise ValueError("empty sample set")
    if mode not in ("occupancy", "alpha"):
        raise ValueError(f"unknown compositing mode {mode!r}")
    _check_sorted(t, mask)

    B, N = t.shape
    positions = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = positions.reshape(-1, 3)
    raw = query_density(grid, flat).reshape(B, N)

    if mode == "occupancy":
        occ = occupancy(raw)
    else:
        # exp-based compositing; the trailing spacing replicates its neighbor
        delta = t[..., 1:] - t[..., :-1]
        delta = torch.cat([delta, delta[..., -1:]], dim=-1)
        occ = 1.0 - torch.exp(-torch.relu(raw) * delta)

    if mask is not None:
        occ = torch.where(mask, occ, torch.zeros_like(occ))

    weights = composite_weights(occ)
    feat = query_appearance(grid, flat)
    view_dirs = dirs[:, None, :].expand(B, N, 3).reshape(-1, 3)
    colors = decode_color(dec, feat, view_dirs).reshape(B, N, 3)

    color = (weights.unsqueeze(-1) * colors).sum(dim=-2)
    depth = (weights * t).sum(dim=-1)
    opacity_sum = weights.sum(dim=-1)
    depth_norm = depth / opacity_sum.clamp_min(1e-12)
    depth_norm = torch.where(opacity_sum > 1e-12, depth_norm, torch.zeros_like(depth_norm))
    low = opacity_sum < opacity_floor
    return RenderBatch(color, depth, depth_norm, weights, opacity_sum, low)


def render_ray(grid: FactorizedGrid, dec: Decoder, ray: Ray, samples) -> RenderResult:
    """Render one ray from a RaySamples set; returns numpy results."""
    t = np.asarray(samples.t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("empty sample set")
    dtype = grid.dtype
    origins = torch.as_tensor(ray.origin, dtype=dtype).unsqueeze(0)
    dirs = torch.as_tensor(ray.direction, dtype=dtype).unsqueeze(0)
    tt = torch.as_tensor(t, dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        out = render_rays(grid, dec, origins, dirs, tt)
    return RenderResult(
        color=out.color[0].numpy(),
        depth=float(out.depth[0]),
        depth_normalized=float(out.depth_normalized[0]),
        weights=out.weights[0].numpy(),
        opacity=float(out.opacity[0]),
        low_confidence=bool(out.low_confidence[0]),
    )


@dataclass
class ViewRender:
    """Flattened full-view render plus the ray geometry that produced it."""

    grid_shape: tuple[int, int]  # strided (rows, cols)
    origins: np.ndarray  # (P, 3)
    dirs: np.ndarray  # (P, 3)
    color: np.ndarray  # (P, 3)
    depth: np.ndarray  # (P,)
    depth_normalized: np.ndarray  # (P,)
    opacity: np.ndarray  # (P,)
    low_confidence: np.ndarray  # (P,) bool

    def color_image(self) -> np.ndarray:
        return self.color.reshape(*self.grid_shape, 3)

    def depth_image(self, normalized: bool = True) -> np.ndarray:
        d = self.depth_normalized if normalized else self.depth
        return d.reshape(self.grid_shape)

    def opacity_image(self) -> np.ndarray:
        return self.opacity.reshape(self.grid_shape)


def render_view(
    grid: FactorizedGrid,
    dec: Decoder,
    pose: Pose,
    intr: CameraIntrinsics,
    *,
    pixel_stride: int = 1,
    coarse_samples: int = 48,
    fine_samples: int = 48,
    chunk_rays: int = 4096,
    mode: str = "occupancy",
    opacity_floor: float = DEFAULT_OPACITY_FLOOR,
) -> ViewRender:
    """Deterministic full-image render from a fixed pose.

    Coarse samples sit at equal-spacing midpoints between the per-ray
    box entry/exit distances; the refinement pass places fine samples at
    the evenly spaced quantiles of the coarse weight CDF, so repeated
    calls are bit-identical (no RNG involved).
    """
    us = np.arange(0, intr.width, pixel_stride, dtype=np.float64) + 0.5
    vs = np.arange(0, intr.height, pixel_stride, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(us, vs)
    d_cam = np.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    R = pose.rotation_matrix()
    dirs = d_cam @ R.T
    origins = np.broadcast_to(pose.trans, dirs.shape).copy()
    near, far = ray_aabb_range(origins, dirs, grid.bounds.min, grid.bounds.max)
    far = np.maximum(far, near + 1e-3)

    P = dirs.shape[0]
    dtype = grid.dtype
    out = {
        "color": np.zeros((P, 3), dtype=np.float64),
        "depth": np.zeros(P, dtype=np.float64),
        "depth_normalized": np.zeros(P, dtype=np.float64),
        "opacity": np.zeros(P, dtype=np.float64),
        "low_confidence": np.zeros(P, dtype=bool),
    }
    offsets = (np.arange(coarse_samples, dtype=np.float64) + 0.5) / coarse_samples
    fine_u = (np.arange(fine_samples, dtype=np.float64) + 0.5) / fine_samples

    with torch.no_grad():
        for lo in range(0, P, chunk_rays):
            hi = min(lo + chunk_rays, P)
            n_chunk = hi - lo
            t_coarse = near[lo:hi, None] + offsets[None, :] * (far[lo:hi] - near[lo:hi])[:, None]
            o_t = torch.as_tensor(origins[lo:hi], dtype=dtype)
            d_t = torch.as_tensor(dirs[lo:hi], dtype=dtype)
            coarse = render_rays(
                grid, dec, o_t, d_t, torch.as_tensor(t_coarse, dtype=dtype),
                mode=mode, opacity_floor=opacity_floor,
            )
            w = coarse.weights.numpy().astype(np.float64) + 1e-12
            t_fine = invert_cdf_batch(
                t_coarse, w, near[lo:hi], far[lo:hi], np.broadcast_to(fine_u, (n_chunk, fine_samples))
            )
            t_all = np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)
            final = render_rays(
                grid, dec, o_t, d_t, torch.as_tensor(t_all, dtype=dtype),
                mode=mode, opacity_floor=opacity_floor,
            )
            out["color"][lo:hi] = final.color.numpy()
            out["depth"][lo:hi] = final.depth.numpy()
            out["depth_normalized"][lo:hi] = final.depth_normalized.numpy()
            out["opacity"][lo:hi] = final.opacity.numpy()
            out["low_confidence"][lo:hi] = final.low_confidence.numpy()

    return ViewRender(
        grid_shape=(vs.size, us.size),
        origins=origins,
        dirs=dirs,
        color=out["color"],
        depth=out["depth"],
        depth_normalized=out["depth_normalized"],
        opacity=out["opacity"],
        low_confidence=out["low_confidence"],
    )
