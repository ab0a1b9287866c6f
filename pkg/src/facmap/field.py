"""Factorized radiance-field map: vector-matrix grids plus a tiny color MLP.

The scene volume is an axis-aligned box. Density and appearance are each
stored as three (plane matrix, line vector) factor pairs, one per axis:
the plane for axis X lives on the YZ face, its line along X, and so on.
A query costs one bilinear plus one linear interpolation per axis; the
per-axis channel products are summed over channels for density and kept
(concatenated across axes) as the appearance feature.

All interpolation is written out explicitly so the value equals trilinear
interpolation of the dense rank-decomposed tensor bit-for-bit up to float
rounding, and so gradients reach exactly the touched 2x2 / 2 entries.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

__all__ = [
    "SceneBounds",
    "FactorizedGrid",
    "Decoder",
    "normalize_coord",
    "query_density",
    "query_appearance",
    "occupancy",
    "decode_color",
    "param_count",
    "flops_per_point",
    "save_checkpoint",
    "load_checkpoint",
]

# axis k uses the plane over the remaining two axes (in ascending order)
_PLANE_AXES = ((1, 2), (0, 2), (0, 1))

CHECKPOINT_MAGIC = b"FACMAPCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned bounding box of the mapped volume, meters."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("bounds must be 3-vectors")
        if not np.all(lo < hi):
            raise ValueError(f"bounds min {lo} must be strictly below max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.extent))


def normalize_coord(bounds: SceneBounds, p):
    """(p - min) / (max - min), clamped to [0, 1] per component (numpy)."""
    p = np.asarray(p, dtype=np.float64)
    n = (p - bounds.min) / bounds.extent
    return np.clip(n, 0.0, 1.0)


class FactorizedGrid(nn.Module):
    """Plane/line factor stacks for density (C=16) and appearance (C=24).

    Planes are stored stacked as (3, res, res, C) and lines as (3, res, C);
    entries start at N(0, init_std^2) drawn from the supplied numpy
    generator so runs are reproducible without touching torch's global RNG.
    """

    def __init__(
        self,
        bounds: SceneBounds,
        res: int = 128,
        density_channels: int = 16,
        appearance_channels: int = 24,
        *,
        init_std: float = 0.1,
        rng: np.random.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if res < 2:
            raise ValueError("res must be at least 2")
        self.bounds = bounds
        self.res = res
        self.density_channels = density_channels
        self.appearance_channels = appearance_channels
        rng = rng if rng is not None else np.random.default_rng(0)

        def init(shape):
            arr = rng.normal(0.0, init_std, size=shape)
            return nn.Parameter(torch.as_tensor(arr, dtype=dtype))

        self.density_planes = init((3, res, res, density_channels))
        self.density_lines = init((3, res, density_channels))
        self.appearance_planes = init((3, res, res, appearance_channels))
        self.appearance_lines = init((3, res, appearance_channels))

    @property
    def dtype(self):
        return self.density_planes.dtype

    @property
    def feature_dim(self) -> int:
        return 3 * self.appearance_channels

    def cell_size(self) -> np.ndarray:
        return self.bounds.extent / (self.res - 1)

    def normalize(self, points: torch.Tensor):
        """World points (N, 3) -> grid coords in [0, res-1] plus out-of-box flags."""
        lo = torch.as_tensor(self.bounds.min, dtype=points.dtype, device=points.device)
        ext = torch.as_tensor(self.bounds.extent, dtype=points.dtype, device=points.device)
        n = (points - lo) / ext
        flagged = ((n < 0.0) | (n > 1.0)).any(dim=-1)
        n = n.clamp(0.0, 1.0)
        return n * (self.res - 1), flagged


def _interp_line(line: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Linear interpolation of (res, C) at fractional indices x (N,) -> (N, C)."""
    res = line.shape[0]
    i0 = x.floor().long().clamp(0, res - 2)
    f = (x - i0.to(x.dtype)).unsqueeze(-1)
    return line[i0] * (1 - f) + line[i0 + 1] * f


def _interp_plane(plane: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Bilinear interpolation of (res, res, C) at indices (a, b) -> (N, C)."""
    res = plane.shape[0]
    i0 = a.floor().long().clamp(0, res - 2)
    j0 = b.floor().long().clamp(0, res - 2)
    fa = (a - i0.to(a.dtype)).unsqueeze(-1)
    fb = (b - j0.to(b.dtype)).unsqueeze(-1)
    v00 = plane[i0, j0]
    v10 = plane[i0 + 1, j0]
    v01 = plane[i0, j0 + 1]
    v11 = plane[i0 + 1, j0 + 1]
    return (
        v00 * (1 - fa) * (1 - fb)
        + v10 * fa * (1 - fb)
        + v01 * (1 - fa) * fb
        + v11 * fa * fb
    )


def _axis_products(planes, lines, coords):
    feats = []
    for axis in range(3):
        pa, pb = _PLANE_AXES[axis]
        plane_f = _interp_plane(planes[axis], coords[:, pa], coords[:, pb])
        line_f = _interp_line(lines[axis], coords[:, axis])
        feats.append(plane_f * line_f)
    return feats


def _check_points(points: torch.Tensor):
    if points.ndim != 2 or points.shape[-1] != 3:
        raise ValueError(f"points must be (N, 3), got {tuple(points.shape)}")
    if not torch.isfinite(points).all():
        raise ValueError("non-finite query point")


def query_density(grid: FactorizedGrid, points: torch.Tensor) -> torch.Tensor:
    """Raw density at world points (N, 3) -> (N,).

    Out-of-box points are clamped onto the box; their value is detached so
    no gradient leaks into edge cells from outside geometry.
    """
    _check_points(points)
    coords, flagged = grid.normalize(points)
    feats = _axis_products(grid.density_planes, grid.density_lines, coords)
    raw = sum(f.sum(dim=-1) for f in feats)
    if bool(flagged.any()):
        raw = torch.where(flagged, raw.detach(), raw)
    return raw


def query_appearance(grid: FactorizedGrid, points: torch.Tensor) -> torch.Tensor:
    """Appearance feature at world points (N, 3) -> (N, 3 * C_app)."""
    _check_points(points)
    coords, flagged = grid.normalize(points)
    feats = _axis_products(grid.appearance_planes, grid.appearance_lines, coords)
    feat = torch.cat(feats, dim=-1)
    if bool(flagged.any()):
        feat = torch.where(flagged.unsqueeze(-1), feat.detach(), feat)
    return feat


def occupancy(raw):
    """Sigmoid of raw density; works on tensors, arrays, and floats."""
    if isinstance(raw, torch.Tensor):
        if not torch.isfinite(raw).all():
            raise ValueError("non-finite density")
        return torch.sigmoid(raw)
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite density")
    out = 1.0 / (1.0 + np.exp(-raw))
    return float(out) if out.ndim == 0 else out


class Decoder(nn.Module):
    """Two-layer color perceptron: (feature, view direction) -> RGB in (0, 1).

    Input is the 3*C_app appearance feature concatenated with the raw unit
    view direction (no frequency encoding). Weights and biases start
    uniform in +-1/sqrt(fan_in).
    """

    def __init__(
        self,
        feature_dim: int = 72,
        hidden: int = 48,
        *,
        rng: np.random.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.dir_dim = 3
        in_dim = feature_dim + self.dir_dim
        rng = rng if rng is not None else np.random.default_rng(0)

        def init(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return nn.Parameter(torch.as_tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype))

        self.w1 = init(in_dim, (in_dim, hidden))
        self.b1 = init(in_dim, (hidden,))
        self.w2 = init(hidden, (hidden, 3))
        self.b2 = init(hidden, (3,))

    def forward(self, feature: torch.Tensor, direction: torch.Tensor) -> torch.Tensor:
        x = torch.cat([feature, direction], dim=-1)
        h = torch.relu(x @ self.w1 + self.b1)
        return torch.sigmoid(h @ self.w2 + self.b2)


def decode_color(dec: Decoder, feature: torch.Tensor, direction: torch.Tensor) -> torch.Tensor:
    """RGB for features (N, 3*C_app) and unit directions (N, 3)."""
    norms = direction.norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
        raise ValueError("view directions must be unit norm")
    return dec(feature, direction)


def param_count(grid: FactorizedGrid, dec: Decoder | None = None) -> int:
    """Exact number of trainable scalars in grid (+ decoder)."""
    n = sum(p.numel() for p in grid.parameters())
    if dec is not None:
        n += sum(p.numel() for p in dec.parameters())
    return n


def flops_per_point(grid: FactorizedGrid, dec: Decoder | None = None) -> int:
    """FLOPs for one density query + one appearance query + one decoder pass.

    Convention: each multiply-add counts as 2 FLOPs. Per axis and channel,
    a bilinear read is 4 MACs, a linear read 2 MACs, and the plane*line
    product plus channel reduction 1 MAC, so 7 MACs per channel per axis.
    Decoder: one MAC per weight, plus 1 FLOP per ReLU and 4 per sigmoid.
    Index arithmetic and interpolation-weight setup are not counted.
    """
    macs = 3 * 7 * grid.density_channels
    macs += 3 * 7 * grid.appearance_channels
    flops = 2 * macs
    if dec is not None:
        dec_macs = dec.w1.numel() + dec.w2.numel()
        flops += 2 * dec_macs + dec.hidden + 4 * 3
    return flops


# --- checkpoint container -----------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..7    magic "FACMAPCK"
#   bytes 8..11   uint32 version (currently 1)
#   bytes 12..15  uint32 header length H
#   bytes 16..16+H  UTF-8 JSON header: bounds_min, bounds_max, res,
#                   density_channels, appearance_channels, hidden,
#                   arrays: [{name, shape}, ...] in payload order
#   remainder     float32 little-endian C-order array payloads


def _array_manifest(grid: FactorizedGrid, dec: Decoder):
    return [
        ("density_planes", grid.density_planes),
        ("density_lines", grid.density_lines),
        ("appearance_planes", grid.appearance_planes),
        ("appearance_lines", grid.appearance_lines),
        ("decoder_w1", dec.w1),
        ("decoder_b1", dec.b1),
        ("decoder_w2", dec.w2),
        ("decoder_b2", dec.b2),
    ]


def save_checkpoint(path, grid: FactorizedGrid, dec: Decoder) -> None:
    arrays = _array_manifest(grid, dec)
    header = {
        "bounds_min": [float(v) for v in grid.bounds.min],
        "bounds_max": [float(v) for v in grid.bounds.max],
        "res": grid.res,
        "density_channels": grid.density_channels,
        "appearance_channels": grid.appearance_channels,
        "hidden": dec.hidden,
        "arrays": [{"name": n, "shape": list(t.shape)} for n, t in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, tensor in arrays:
            data = tensor.detach().cpu().numpy().astype("<f4")
            f.write(data.tobytes(order="C"))
    os.replace(tmp, path)


def load_checkpoint(path, *, dtype: torch.dtype = torch.float32):
    """Rebuild (grid, decoder) from a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a map checkpoint: {path}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            data = np.frombuffer(f.read(count * 4), dtype="<f4").reshape(shape)
            payload[entry["name"]] = data

    bounds = SceneBounds(np.array(header["bounds_min"]), np.array(header["bounds_max"]))
    grid = FactorizedGrid(
        bounds,
        res=header["res"],
        density_channels=header["density_channels"],
        appearance_channels=header["appearance_channels"],
        dtype=dtype,
    )
    dec = Decoder(feature_dim=3 * header["appearance_channels"], hidden=header["hidden"], dtype=dtype)
    with torch.no_grad():
        grid.density_planes.copy_(torch.as_tensor(payload["density_planes"].copy(), dtype=dtype))
        grid.density_lines.copy_(torch.as_tensor(payload["density_lines"].copy(), dtype=dtype))
        grid.appearance_planes.copy_(torch.as_tensor(payload["appearance_planes"].copy(), dtype=dtype))
        grid.appearance_lines.copy_(torch.as_tensor(payload["appearance_lines"].copy(), dtype=dtype))
        dec.w1.copy_(torch.as_tensor(payload["decoder_w1"].copy(), dtype=dtype))
        dec.b1.copy_(torch.as_tensor(payload["decoder_b1"].copy(), dtype=dtype))
        dec.w2.copy_(torch.as_tensor(payload["decoder_w2"].copy(), dtype=dtype))
        dec.b2.copy_(torch.as_tensor(payload["decoder_b2"].copy(), dtype=dtype))
    return grid, dec
