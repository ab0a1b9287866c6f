"""Reconstruction and rendering metrics.

Point-cloud metrics follow the usual directed nearest-neighbor
definitions: accuracy averages predicted-to-truth distances, completion
averages truth-to-predicted distances, and the completion ratio counts
the truth points within a threshold (5 cm by default). Nearest neighbors
come from an exact k-d tree query. Distances are reported in centimeters.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "ReconReport",
    "accuracy",
    "completion",
    "completion_ratio",
    "psnr",
    "depth_mae",
    "evaluate_reconstruction",
]

PSNR_CAP_DB = 99.0
DEFAULT_THRESHOLD_CM = 5.0


def _positions(cloud) -> np.ndarray:
    pts = getattr(cloud, "positions", cloud)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("point cloud is empty")
    return pts


def _nn_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    dist, _ = cKDTree(dst).query(src, k=1)
    return dist


def accuracy(pred, gt) -> float:
    """Mean distance (cm) from each predicted point to its nearest truth point."""
    return float(np.mean(_nn_distances(_positions(pred), _positions(gt)))) * 100.0


def completion(pred, gt) -> float:
    """Mean distance (cm) from each truth point to its nearest predicted point."""
    return float(np.mean(_nn_distances(_positions(gt), _positions(pred)))) * 100.0


def completion_ratio(pred, gt, threshold_cm: float = DEFAULT_THRESHOLD_CM) -> float:
    """Percentage of truth points within threshold_cm of the prediction."""
    dist_cm = _nn_distances(_positions(gt), _positions(pred)) * 100.0
    return float(np.mean(dist_cm < threshold_cm)) * 100.0


def psnr(rendered, reference, cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped when equal."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return cap_db
    return min(cap_db, -10.0 * np.log10(mse))


def depth_mae(rendered_depth, gt_depth, valid_mask=None) -> float:
    """Mean absolute depth error in meters over the valid mask."""
    r = np.asarray(rendered_depth, dtype=np.float64)
    g = np.asarray(gt_depth, dtype=np.float64)
    if r.shape != g.shape:
        raise ValueError("depth shapes differ")
    mask = np.isfinite(g) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    if not np.any(mask):
        raise ValueError("empty valid mask")
    return float(np.mean(np.abs(r[mask] - g[mask])))


@dataclass(frozen=True)
class ReconReport:
    """One evaluation row; serialized as CSV with a fixed header."""

    accuracy_cm: float
    completion_cm: float
    completion_ratio_pct: float
    threshold_cm: float = DEFAULT_THRESHOLD_CM
    psnr_db: float | None = None
    depth_mae_m: float | None = None

    HEADER = "accuracy_cm,completion_cm,completion_ratio_pct,threshold_cm,psnr_db,depth_mae_m"

    def to_csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        return ",".join(
            [
                f"{self.accuracy_cm:.6f}",
                f"{self.completion_cm:.6f}",
                f"{self.completion_ratio_pct:.6f}",
                f"{self.threshold_cm:.6f}",
                fmt(self.psnr_db),
                fmt(self.depth_mae_m),
            ]
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.HEADER + "\n")
        buf.write(self.to_csv_row() + "\n")
        return buf.getvalue()


def evaluate_reconstruction(
    pred, gt, threshold_cm: float = DEFAULT_THRESHOLD_CM, psnr_db=None, depth_mae_m=None
) -> ReconReport:
    return ReconReport(
        accuracy_cm=accuracy(pred, gt),
        completion_cm=completion(pred, gt),
        completion_ratio_pct=completion_ratio(pred, gt, threshold_cm),
        threshold_cm=threshold_cm,
        psnr_db=psnr_db,
        depth_mae_m=depth_mae_m,
    )
