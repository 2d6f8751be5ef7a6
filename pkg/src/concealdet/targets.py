"""Ground-truth encoding: boxes -> stride-4 heatmap/offset/size supervision.

Array conventions: heatmaps are indexed ``[row, col]``; offset channels are
``(row_frac, col_frac)`` so that ``cell + offset`` is the feature-grid center;
size channels are ``(width, height)`` in stride-4 units. Targets are float64
so exactness properties (power-of-two scaling) hold; cast at the training edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import BoundingBox

STRIDE = 4


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Kernel radius such that a box shifted by it keeps roughly min_overlap IoU.

    The three quadratic cases cover a corner moving outward, inward, and both
    corners moving symmetrically; the binding constraint is the smallest root.
    """
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    sq1 = math.sqrt(max(b1 * b1 - 4 * a1 * c1, 0.0))
    r1 = (b1 + sq1) / 2

    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    sq2 = math.sqrt(max(b2 * b2 - 4 * a2 * c2, 0.0))
    r2 = (b2 + sq2) / 2

    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    sq3 = math.sqrt(max(b3 * b3 - 4 * a3 * c3, 0.0))
    r3 = (b3 + sq3) / 2
    return max(0.0, min(r1, r2, r3))


@dataclass
class TargetMaps:
    """Supervision arrays at stride 4 plus the center-cell index list.

    ``heatmap`` is the max-merged Gaussian splat; ``offset_target`` and
    ``size_target`` are meaningful only at ``center_indices`` cells (all other
    cells are excluded from the regression losses).
    """

    heatmap: np.ndarray  # (Hs, Ws)
    offset_target: np.ndarray  # (Hs, Ws, 2), (row_frac, col_frac)
    size_target: np.ndarray  # (Hs, Ws, 2), (w, h) in stride units
    center_indices: list[tuple[int, int]] = field(default_factory=list)
    per_object_sigma: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_objects(self) -> int:
        return len(self.center_indices)

    def validate(self) -> None:
        hs, ws = self.heatmap.shape
        if self.offset_target.shape != (hs, ws, 2) or self.size_target.shape != (hs, ws, 2):
            raise ValueError("target array shapes disagree")
        if self.heatmap.min() < 0.0 or self.heatmap.max() > 1.0:
            raise ValueError("heatmap outside [0, 1]")
        for row, col in self.center_indices:
            if self.heatmap[row, col] != 1.0:
                raise ValueError(f"center cell ({row},{col}) not at 1.0")
            off = self.offset_target[row, col]
            if not (0.0 <= off[0] < 1.0 and 0.0 <= off[1] < 1.0):
                raise ValueError(f"offset at ({row},{col}) outside [0,1)")
            if min(self.size_target[row, col]) <= 0.0:
                raise ValueError(f"non-positive size at ({row},{col})")


def _splat_gaussian(heatmap: np.ndarray, row: int, col: int, sigma: float) -> None:
    hs, ws = heatmap.shape
    rr = np.arange(hs, dtype=np.float64)[:, None]
    cc = np.arange(ws, dtype=np.float64)[None, :]
    kernel = np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2.0 * sigma * sigma))
    np.maximum(heatmap, kernel, out=heatmap)


def encode_targets(boxes: list[BoundingBox], image_size: tuple[int, int]) -> TargetMaps:
    """Splat each box as a size-adaptive Gaussian and record center regressions.

    Boxes thinner than one stride-4 cell are clamped to one cell (a warning is
    recorded on the result); Gaussians are merged by per-pixel max so the
    heatmap stays in [0, 1] with exact 1.0 at every center cell.
    """
    h, w = image_size
    if h % STRIDE != 0 or w % STRIDE != 0:
        raise ValueError(f"image size {image_size} not divisible by {STRIDE}")
    hs, ws = h // STRIDE, w // STRIDE
    maps = TargetMaps(
        heatmap=np.zeros((hs, ws), dtype=np.float64),
        offset_target=np.zeros((hs, ws, 2), dtype=np.float64),
        size_target=np.zeros((hs, ws, 2), dtype=np.float64),
    )
    for box in boxes:
        clipped = box.clip(w, h)
        if clipped is None:
            raise ValueError(f"box {box.as_tuple()} outside image {image_size}")
        cx, cy = clipped.center
        bw = clipped.width / STRIDE
        bh = clipped.height / STRIDE
        if bw < 1.0 or bh < 1.0:
            maps.warnings.append(
                f"box {box.as_tuple()} thinner than one cell, size clamped"
            )
            bw = max(bw, 1.0)
            bh = max(bh, 1.0)
        row = min(int(cy / STRIDE), hs - 1)
        col = min(int(cx / STRIDE), ws - 1)
        sigma = max(gaussian_radius(bh, bw) / 3.0, 1.0 / 3.0)
        _splat_gaussian(maps.heatmap, row, col, sigma)
        maps.offset_target[row, col] = (cy / STRIDE - row, cx / STRIDE - col)
        maps.size_target[row, col] = (bw, bh)
        maps.center_indices.append((row, col))
        maps.per_object_sigma.append(sigma)
    return maps


def foreground_background_masks(
    boxes: list[BoundingBox], image_size: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Union-of-boxes foreground mask and its complement, at full resolution.

    A pixel belongs to the foreground when its center falls inside any box.
    """
    h, w = image_size
    fg = np.zeros((h, w), dtype=bool)
    cols = np.arange(w, dtype=np.float64) + 0.5
    rows = np.arange(h, dtype=np.float64) + 0.5
    for box in boxes:
        in_cols = (cols >= box.x_lt) & (cols < box.x_rb)
        in_rows = (rows >= box.y_lt) & (rows < box.y_rb)
        fg |= in_rows[:, None] & in_cols[None, :]
    return fg, ~fg
