"""Ray-sample generation: stratified bootstrap, inverse-transform
refinement, and the sliding-window sampler used during map initialization.

Sample sets grow monotonically: every refinement returns the sorted union
of old and new distances (exact duplicates dropped), so information from
earlier iterations is never discarded. All randomness comes from an
explicit numpy Generator; with a fixed seed every output is
bit-reproducible.

Scores blend a spacing prior with rendering weights,
``W = blend * exp(-spacing) + (1 - blend) * w``; a box kernel smooths
them, and contiguous runs of high-scoring samples become the qualified
intervals that receive the stratified share of new samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RaySamples",
    "ScoreVector",
    "IntervalSet",
    "stratified",
    "stratified_batch",
    "invert_cdf_batch",
    "inverse_transform",
    "update_scores",
    "smooth_scores",
    "find_intervals",
    "sliding_window_sample",
]

_DEDUP_EPS = 1e-12


@dataclass(frozen=True)
class RaySamples:
    """Strictly sorted sample distances along one ray, meters."""

    t: np.ndarray
    near: float
    far: float
    iteration: int = 0
    fallback: bool = False  # inverse transform degenerated to stratified

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("t must be a non-empty 1-D array")
        if np.any(np.diff(t) <= 0):
            raise ValueError("sample distances must be strictly sorted")
        if t[0] < self.near - 1e-9 or t[-1] > self.far + 1e-9:
            raise ValueError("samples outside [near, far]")
        object.__setattr__(self, "t", t)

    def __len__(self) -> int:
        return self.t.size

    def spacings(self) -> np.ndarray:
        """Adjacent spacings, length len(t); the last entry replicates its neighbor."""
        if self.t.size == 1:
            return np.array([self.far - self.near])
        d = np.diff(self.t)
        return np.append(d, d[-1])


@dataclass(frozen=True)
class ScoreVector:
    """Per-sample scores and their box-smoothed version."""

    scores: np.ndarray
    smoothed: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.scores, dtype=np.float64)
        sw = np.asarray(self.smoothed, dtype=np.float64)
        if w.shape != sw.shape:
            raise ValueError("scores and smoothed must have the same shape")
        if not (np.all(np.isfinite(w)) and np.all(w >= 0)):
            raise ValueError("scores must be finite and non-negative")
        object.__setattr__(self, "scores", w)
        object.__setattr__(self, "smoothed", sw)


@dataclass(frozen=True)
class IntervalSet:
    """Disjoint sorted (t_near, t_far) pairs, shape (K, 2)."""

    bounds: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=np.float64).reshape(-1, 2)
        if b.shape[0] == 0:
            raise ValueError("interval set must not be empty")
        if np.any(b[:, 0] >= b[:, 1]):
            raise ValueError("each interval needs t_near < t_far")
        if np.any(b[1:, 0] < b[:-1, 1]):
            raise ValueError("intervals must be disjoint and sorted")
        object.__setattr__(self, "bounds", b)

    def __len__(self) -> int:
        return self.bounds.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.bounds[:, 1] - self.bounds[:, 0]

    def contains(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        lo = self.bounds[:, 0][:, None]
        hi = self.bounds[:, 1][:, None]
        return np.any((t[None, :] >= lo) & (t[None, :] <= hi), axis=0)


def stratified(near: float, far: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw inside each of n equal bins of [near, far], sorted."""
    if not near < far:
        raise ValueError(f"need near < far, got [{near}, {far}]")
    if n < 1:
        raise ValueError("n must be >= 1")
    edges = np.linspace(near, far, n + 1)
    u = rng.random(n)
    return edges[:-1] + u * np.diff(edges)


def stratified_batch(near, far, n: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified draws for many rays at once: (B,) bounds -> (B, n) sorted t."""
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if np.any(near >= far):
        raise ValueError("need near < far for every ray")
    u = rng.random((near.size, n))
    step = (far - near)[:, None] / n
    return near[:, None] + (np.arange(n)[None, :] + u) * step


def invert_cdf_batch(t, weights, near, far, u) -> np.ndarray:
    """Invert per-ray piecewise-constant CDFs at quantiles u.

    Each sample owns the cell between the midpoints to its neighbors
    (extended to near/far at the ends) and carries its normalized weight
    as that cell's probability mass. t/weights (B, N); near/far (B,);
    u (B, M) in [0, 1). Rows must have a positive weight sum.
    """
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    B, N = t.shape

    edges = np.empty((B, N + 1))
    edges[:, 0] = near
    edges[:, -1] = far
    edges[:, 1:-1] = 0.5 * (t[:, :-1] + t[:, 1:])
    wsum = w.sum(axis=1, keepdims=True)
    if np.any(wsum <= 0):
        raise ValueError("every row needs a positive weight sum")
    probs = w / wsum
    cdf = np.concatenate([np.zeros((B, 1)), np.cumsum(probs, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    # offset rows by 2*row so one flattened searchsorted covers the batch
    offset = 2.0 * np.arange(B)[:, None]
    flat_idx = np.searchsorted((cdf + offset).reshape(-1), (u + offset).reshape(-1), side="right") - 1
    idx = flat_idx.reshape(B, -1) - np.arange(B)[:, None] * (N + 1)
    idx = np.clip(idx, 0, N - 1)
    rows = np.arange(B)[:, None]
    mass = np.maximum(probs[rows, idx], 1e-300)
    frac = (u - cdf[rows, idx]) / mass
    return edges[rows, idx] + frac * (edges[rows, idx + 1] - edges[rows, idx])


def _merge(existing: np.ndarray, new: np.ndarray, near: float, far: float) -> np.ndarray:
    t = np.concatenate([existing, np.clip(new, near, far)])
    t.sort()
    keep = np.empty(t.size, dtype=bool)
    keep[0] = True
    keep[1:] = np.diff(t) > _DEDUP_EPS
    return t[keep]


def _piecewise_cdf_draw(t, weights, near, far, m, rng):
    u = rng.random((1, m))
    return invert_cdf_batch(t[None, :], weights[None, :], [near], [far], u)[0]


def inverse_transform(
    samples: RaySamples, weights, m: int, rng: np.random.Generator
) -> RaySamples:
    """Refine a sample set by m draws from the weight-induced distribution.

    The piecewise-constant pdf puts each sample's weight on its own cell.
    All-zero weights fall back to stratified draws over [near, far] and
    flag the ray. The result is the sorted union with the input samples.
    """
    w = weights.scores if isinstance(weights, ScoreVector) else np.asarray(weights, dtype=np.float64)
    if w.shape != samples.t.shape:
        raise ValueError("weights length must match samples")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if m < 1:
        raise ValueError("m must be >= 1")

    fallback = not np.any(w > 0)
    if fallback:
        new = stratified(samples.near, samples.far, m, rng)
    else:
        new = _piecewise_cdf_draw(samples.t, w, samples.near, samples.far, m, rng)
    merged = _merge(samples.t, new, samples.near, samples.far)
    return RaySamples(
        merged,
        samples.near,
        samples.far,
        iteration=samples.iteration + 1,
        fallback=samples.fallback or fallback,
    )


def update_scores(spacings, render_weights, blend: float) -> np.ndarray:
    """blend * exp(-spacing) + (1 - blend) * rendering weight, element-wise."""
    d = np.asarray(spacings, dtype=np.float64)
    w = np.asarray(render_weights, dtype=np.float64)
    if d.shape != w.shape:
        raise ValueError(f"spacings {d.shape} and weights {w.shape} differ")
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must be in [0, 1]")
    return blend * np.exp(-d) + (1.0 - blend) * w


def smooth_scores(scores, kernel_size: int) -> np.ndarray:
    """Box-filter moving average with replicate padding.

    Odd kernels are centered; an even kernel_size uses a right-heavy
    window covering [i - size/2 + 1, i + size/2].
    """
    w = np.asarray(scores, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("scores must be a non-empty 1-D array")
    if kernel_size < 1:
        raise ValueError("kernel_size must be >= 1")
    if kernel_size == 1:
        return w.copy()
    right = kernel_size // 2
    left = kernel_size - 1 - right
    padded = np.pad(w, (left, right), mode="edge")
    csum = np.concatenate([[0.0], np.cumsum(padded)])
    return (csum[kernel_size:] - csum[:-kernel_size]) / kernel_size


def find_intervals(
    smoothed,
    t,
    near: float,
    far: float,
    *,
    quantile: float = 0.8,
    gap_tol: float | None = None,
    pad: float | None = None,
) -> IntervalSet:
    """Qualified intervals: runs of samples whose smoothed score reaches the
    per-ray quantile threshold, merged across gaps up to gap_tol and padded.

    gap_tol defaults to 2x and pad to 1x the mean sample spacing. Degenerate
    score profiles (everything or nothing selected) yield the full span.
    """
    sw = np.asarray(smoothed, dtype=np.float64)
    tt = np.asarray(t, dtype=np.float64)
    if sw.shape != tt.shape:
        raise ValueError("smoothed scores must align with t")
    mean_spacing = (tt[-1] - tt[0]) / max(tt.size - 1, 1)
    if mean_spacing <= 0:
        mean_spacing = (far - near) / max(tt.size, 1)
    if gap_tol is None:
        gap_tol = 2.0 * mean_spacing
    if pad is None:
        pad = 1.0 * mean_spacing

    threshold = np.quantile(sw, quantile)
    selected = sw >= threshold
    if selected.all() or not selected.any():
        return IntervalSet(np.array([[near, far]]))

    idx = np.nonzero(selected)[0]
    runs = []
    start = prev = idx[0]
    for i in idx[1:]:
        if tt[i] - tt[prev] <= gap_tol:
            prev = i
            continue
        runs.append((start, prev))
        start = prev = i
    runs.append((start, prev))

    bounds = []
    for s, e in runs:
        lo = max(near, tt[s] - pad)
        hi = min(far, tt[e] + pad)
        if hi <= lo:
            center = 0.5 * (lo + hi)
            lo, hi = center - 1e-9, center + 1e-9
        if bounds and lo <= bounds[-1][1]:
            bounds[-1][1] = max(bounds[-1][1], hi)
        else:
            bounds.append([lo, hi])
    return IntervalSet(np.array(bounds))


def _allocate_proportional(lengths: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder split of `total` across intervals by length."""
    if total == 0:
        return np.zeros(lengths.size, dtype=int)
    quota = lengths / lengths.sum() * total
    counts = np.floor(quota).astype(int)
    remainder = total - counts.sum()
    if remainder > 0:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def sliding_window_sample(
    samples: RaySamples,
    render_weights,
    n_new: int,
    rng: np.random.Generator,
    *,
    mix_ratio: float = 0.4,
    kernel_size: int = 3,
    blend: float = 0.5,
    quantile: float = 0.8,
    gap_factor: float = 2.0,
    pad_factor: float = 1.0,
    intervals: IntervalSet | None = None,
):
    """One sliding-window refinement: blend scores from spacings and the
    latest rendering weights, smooth them, locate qualified intervals, then
    add ceil(mix_ratio * n_new) inverse-transform draws and fill the rest
    with per-interval uniform draws allocated proportionally to interval
    length. Existing samples are always kept.

    gap_factor and pad_factor scale the mean sample spacing to get the
    interval merge tolerance and padding. Returns
    (RaySamples, ScoreVector, IntervalSet).
    """
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError("mix_ratio must be in [0, 1]")
    w = np.asarray(render_weights, dtype=np.float64)
    scores = update_scores(samples.spacings(), w, blend)
    smoothed = smooth_scores(scores, kernel_size)
    sv = ScoreVector(scores, smoothed)
    if intervals is None:
        mean_spacing = (samples.t[-1] - samples.t[0]) / max(len(samples) - 1, 1)
        if mean_spacing <= 0:
            mean_spacing = (samples.far - samples.near) / max(len(samples), 1)
        intervals = find_intervals(
            smoothed, samples.t, samples.near, samples.far,
            quantile=quantile,
            gap_tol=gap_factor * mean_spacing,
            pad=pad_factor * mean_spacing,
        )

    n_pdf = math.ceil(mix_ratio * n_new)
    n_sw = n_new - n_pdf

    pieces = []
    if n_pdf > 0:
        # the inverse-transform share follows the rendering-weight pdf; the
        # blended scores only steer the interval search
        if np.any(w > 0):
            pieces.append(
                _piecewise_cdf_draw(samples.t, w, samples.near, samples.far, n_pdf, rng)
            )
        else:
            pieces.append(stratified(samples.near, samples.far, n_pdf, rng))
    if n_sw > 0:
        counts = _allocate_proportional(intervals.lengths, n_sw)
        for (lo, hi), count in zip(intervals.bounds, counts):
            if count > 0:
                pieces.append(lo + rng.random(count) * (hi - lo))

    new = np.concatenate(pieces) if pieces else np.empty(0)
    merged = _merge(samples.t, new, samples.near, samples.far)
    out = RaySamples(
        merged, samples.near, samples.far,
        iteration=samples.iteration + 1, fallback=samples.fallback,
    )
    return out, sv, intervals
