"""Density-map ground truth from point head annotations.

Pixel ``(i, j)`` is sampled at integer coordinates ``(i, j)``; annotations are
real-valued ``(row, col)`` positions inside the half-open frame
``[0, H) x [0, W)``.  Every kernel is truncated at a fixed number of spreads
and renormalised over its in-frame support, so a density map always sums to
the number of annotations that produced it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class PointSet:
    """Head annotations inside a ``frame_height x frame_width`` frame."""

    points: np.ndarray
    frame_height: int
    frame_width: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 2), dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must have shape (n, 2), got {pts.shape}")
        if self.frame_height <= 0 or self.frame_width <= 0:
            raise ValueError("frame dimensions must be positive")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        inside = (
            (pts[:, 0] >= 0)
            & (pts[:, 0] < self.frame_height)
            & (pts[:, 1] >= 0)
            & (pts[:, 1] < self.frame_width)
        )
        if not np.all(inside):
            bad = pts[~inside][0]
            raise ValueError(
                f"point ({bad[0]}, {bad[1]}) outside frame "
                f"{self.frame_height}x{self.frame_width}"
            )
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.frame_height, self.frame_width)


@dataclass
class KernelConfig:
    mode: str = "adaptive"
    sigma_fixed: float = 4.0
    k_neighbors: int = 3
    beta: float = 0.3
    sigma_floor: float = 1.0
    sigma_fallback: float = 15.0
    truncation_radius_sigmas: float = 4.0

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown kernel mode {self.mode!r}")
        if self.sigma_fixed <= 0:
            raise ValueError("sigma_fixed must be > 0")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.sigma_floor <= 0 or self.sigma_fallback <= 0:
            raise ValueError("sigma_floor and sigma_fallback must be > 0")
        if self.truncation_radius_sigmas < 2:
            raise ValueError("truncation_radius_sigmas must be >= 2")


def knn_mean_distances(points: PointSet, k: int) -> np.ndarray:
    """Mean distance from every annotation to its ``k`` nearest others.

    Entries are NaN where an annotation has no other annotation to measure
    against.  With fewer than ``k`` others, all of them are averaged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(points)
    out = np.full(n, np.nan)
    if n < 2:
        return out
    kk = min(k, n - 1)
    dists, _ = cKDTree(points.points).query(points.points, k=kk + 1)
    # column 0 is the query point itself
    out[:] = dists[:, 1:].mean(axis=1)
    return out


def knn_mean_distance(points: PointSet, index: int, k: int) -> float:
    """Scalar form of :func:`knn_mean_distances`; NaN means undefined."""
    if len(points) == 0:
        raise ValueError("empty point set")
    if not 0 <= index < len(points):
        raise IndexError(f"index {index} out of range for {len(points)} points")
    if k < 1:
        raise ValueError("k must be >= 1")
    others = np.delete(points.points, index, axis=0)
    if len(others) == 0:
        return math.nan
    d = np.sort(np.hypot(*(others - points.points[index]).T))
    return float(d[:k].mean())


def _axis_kernel(center: float, sigma: float, radius: float, size: int):
    lo = max(0, int(math.floor(center - radius)))
    hi = min(size - 1, int(math.ceil(center + radius)))
    idx = np.arange(lo, hi + 1)
    g = np.exp(-0.5 * ((idx - center) / sigma) ** 2)
    return lo, g


def render_kernels(shape: tuple[int, int], points: np.ndarray, sigmas: np.ndarray,
                   truncation: float = 4.0) -> np.ndarray:
    """Sum of unit-mass truncated Gaussians, one per point, on a grid of ``shape``."""
    h, w = shape
    dm = np.zeros((h, w), dtype=np.float64)
    for (r, c), s in zip(points, sigmas):
        radius = truncation * s
        r0, gr = _axis_kernel(r, s, radius, h)
        c0, gc = _axis_kernel(c, s, radius, w)
        # the window always holds the point's own pixel, so mass > 0
        mass = gr.sum() * gc.sum()
        dm[r0:r0 + len(gr), c0:c0 + len(gc)] += np.outer(gr, gc) / mass
    return dm


def fixed_density_map(points: PointSet, cfg: KernelConfig) -> np.ndarray:
    if cfg.mode != "fixed":
        raise ValueError("fixed_density_map requires cfg.mode == 'fixed'")
    sigmas = np.full(len(points), cfg.sigma_fixed)
    return render_kernels(points.shape, points.points, sigmas, cfg.truncation_radius_sigmas)


def adaptive_sigmas(points: PointSet, cfg: KernelConfig) -> np.ndarray:
    """Per-annotation spreads: ``max(floor, beta * mean kNN distance)`` or the fallback."""
    d = knn_mean_distances(points, cfg.k_neighbors)
    sig = np.maximum(cfg.sigma_floor, cfg.beta * d)
    sig[np.isnan(d)] = cfg.sigma_fallback
    return sig


def adaptive_density_map(points: PointSet, cfg: KernelConfig) -> np.ndarray:
    if cfg.mode != "adaptive":
        raise ValueError("adaptive_density_map requires cfg.mode == 'adaptive'")
    return render_kernels(points.shape, points.points, adaptive_sigmas(points, cfg),
                          cfg.truncation_radius_sigmas)


def density_map(points: PointSet, cfg: KernelConfig) -> np.ndarray:
    """Dispatch on ``cfg.mode``."""
    if cfg.mode == "fixed":
        return fixed_density_map(points, cfg)
    return adaptive_density_map(points, cfg)


def downsample_preserving_count(dm: np.ndarray, factor: int) -> np.ndarray:
    """Block-sum by ``factor``; zero-pads bottom/right when not divisible."""
    if factor <= 0:
        raise ValueError("factor must be >= 1")
    dm = np.asarray(dm)
    if factor == 1:
        return dm.copy()
    h, w = dm.shape
    oh, ow = -(-h // factor), -(-w // factor)
    padded = np.zeros((oh * factor, ow * factor), dtype=dm.dtype)
    padded[:h, :w] = dm
    return padded.reshape(oh, factor, ow, factor).sum(axis=(1, 3))


def patch_mean_interhead_distance(points: PointSet, k: int = 10) -> float:
    """Average over annotations of the mean distance to ``k`` nearest neighbours.

    Patches with no defined neighbour distance (zero or one annotation) map to 0.
    """
    d = knn_mean_distances(points, k)
    d = d[~np.isnan(d)]
    return float(d.mean()) if len(d) else 0.0


@dataclass
class DensityStats:
    """Summary used by the ground-truth command."""

    count: int
    mass: float
    peak: float


def summarize(points: PointSet, dm: np.ndarray) -> DensityStats:
    return DensityStats(count=len(points), mass=float(dm.sum()), peak=float(dm.max(initial=0.0)))
