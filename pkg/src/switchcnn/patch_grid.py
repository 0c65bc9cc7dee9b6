"""Non-overlapping patch grid over a scene and reassembly of per-patch maps.

Cells use half-open intervals; the last row and column of cells absorb the
remainder when a frame dimension is not divisible by the grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .ground_truth import PointSet, downsample_preserving_count

if TYPE_CHECKING:
    from .dataset_io import Scene

OUTPUT_FACTOR = 4


@dataclass(frozen=True)
class GridSpec:
    rows: int = 3
    cols: int = 3

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one row and column")

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)]

    def edges(self, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
        """Split indices per axis, length ``rows + 1`` and ``cols + 1``."""
        if height < self.rows or width < self.cols:
            raise ValueError(
                f"frame {height}x{width} too small for a {self.rows}x{self.cols} grid"
            )
        re = np.arange(self.rows + 1) * (height // self.rows)
        ce = np.arange(self.cols + 1) * (width // self.cols)
        re[-1], ce[-1] = height, width
        return re, ce

    def cell_slices(self, height: int, width: int) -> dict[tuple[int, int], tuple[slice, slice]]:
        re, ce = self.edges(height, width)
        return {(r, c): (slice(re[r], re[r + 1]), slice(ce[c], ce[c + 1])) for r, c in self.cells}

    def cell_of(self, row: float, col: float, height: int, width: int) -> tuple[int, int]:
        re, ce = self.edges(height, width)
        return (int(np.searchsorted(re, row, side="right") - 1),
                int(np.searchsorted(ce, col, side="right") - 1))


@dataclass
class PatchRecord:
    pixels: np.ndarray
    points: PointSet
    grid_index: tuple[int, int]
    scene_id: str
    offset: tuple[int, int]
    roi: np.ndarray | None = None


def partition_points(points: PointSet, grid: GridSpec) -> dict[tuple[int, int], PointSet]:
    """Assign each annotation to exactly one cell, in cell-local coordinates."""
    h, w = points.shape
    re, ce = grid.edges(h, w)
    ri = np.searchsorted(re, points.points[:, 0], side="right") - 1
    ci = np.searchsorted(ce, points.points[:, 1], side="right") - 1
    out = {}
    for r, c in grid.cells:
        sel = (ri == r) & (ci == c)
        local = points.points[sel] - np.array([re[r], ce[c]], dtype=np.float64)
        out[(r, c)] = PointSet(local, int(re[r + 1] - re[r]), int(ce[c + 1] - ce[c]))
    return out


def split_scene(scene: Scene, grid: GridSpec = GridSpec()) -> list[PatchRecord]:
    h, w = scene.image.shape
    slices = grid.cell_slices(h, w)
    local = partition_points(scene.points, grid)
    patches = []
    for idx in grid.cells:
        rs, cs = slices[idx]
        patches.append(PatchRecord(
            pixels=scene.image[rs, cs],
            points=local[idx],
            grid_index=idx,
            scene_id=scene.id,
            offset=(rs.start, cs.start),
            roi=None if scene.roi is None else scene.roi[rs, cs],
        ))
    return patches


def output_shape(height: int, width: int, factor: int = OUTPUT_FACTOR) -> tuple[int, int]:
    return (-(-height // factor), -(-width // factor))


def split_density(dm: np.ndarray, grid: GridSpec = GridSpec(),
                  factor: int = OUTPUT_FACTOR) -> dict[tuple[int, int], np.ndarray]:
    """Per-cell ground truth at output resolution, cut from a full-frame map."""
    return {idx: downsample_preserving_count(dm[rs, cs], factor)
            for idx, (rs, cs) in grid.cell_slices(*dm.shape).items()}


def assemble_density(patches: dict[tuple[int, int], np.ndarray], grid: GridSpec,
                     frame_shape: tuple[int, int], factor: int = OUTPUT_FACTOR) -> np.ndarray:
    """Tile per-cell output maps back into one map for the whole frame.

    Each cell contributes ``ceil(cell_dim / factor)`` rows/cols, so the result
    has ``sum`` of those per axis.
    """
    re, ce = grid.edges(*frame_shape)
    heights = [output_shape(re[r + 1] - re[r], 1, factor)[0] for r in range(grid.rows)]
    widths = [output_shape(1, ce[c + 1] - ce[c], factor)[1] for c in range(grid.cols)]
    oro = np.concatenate([[0], np.cumsum(heights)])
    oco = np.concatenate([[0], np.cumsum(widths)])
    dtype = np.result_type(*[np.asarray(p).dtype for p in patches.values()]) if patches else np.float64
    out = np.zeros((oro[-1], oco[-1]), dtype=dtype)
    for r, c in grid.cells:
        if (r, c) not in patches:
            raise KeyError(f"missing density map for cell {(r, c)}")
        p = np.asarray(patches[(r, c)])
        if p.shape != (heights[r], widths[c]):
            raise ValueError(
                f"cell {(r, c)} map has shape {p.shape}, expected {(heights[r], widths[c])}"
            )
        out[oro[r]:oro[r + 1], oco[c]:oco[c + 1]] = p
    return out
