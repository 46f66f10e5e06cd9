"""Anchor grid, box parametrization, IOU and target assignment.

Coordinates are in pixels with the origin at the top-left corner; ``x`` is
the column and ``y`` the row. Boxes are stored by center and size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_CELL = 64


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float
    class_id: int = 0
    frame: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1)."""
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)


@dataclass(frozen=True)
class BoxParam:
    t_x: float
    t_y: float
    t_w: float
    t_h: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.t_x, self.t_y, self.t_w, self.t_h)


@dataclass(frozen=True)
class AnchorGrid:
    """One square anchor per cell, centered in the cell."""

    rows: int
    cols: int
    cell: int = DEFAULT_CELL

    @property
    def n_anchors(self) -> int:
        return self.rows * self.cols

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.rows * self.cell, self.cols * self.cell)

    def anchor(self, row: int, col: int) -> Box:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return Box((col + 0.5) * self.cell, (row + 0.5) * self.cell, float(self.cell), float(self.cell))

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Anchor center arrays (x, y), each of shape [rows, cols]."""
        xs = (np.arange(self.cols) + 0.5) * self.cell
        ys = (np.arange(self.rows) + 0.5) * self.cell
        return np.broadcast_to(xs[None, :], (self.rows, self.cols)), np.broadcast_to(ys[:, None], (self.rows, self.cols))

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell containing a point; boundaries go to the higher index."""
        h, w = self.image_shape
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"point ({x}, {y}) lies outside the {h}x{w} image")
        return int(math.floor(y / self.cell)), int(math.floor(x / self.cell))


def build_anchor_grid(image_h: int, image_w: int, cell: int = DEFAULT_CELL) -> AnchorGrid:
    if cell < 1:
        raise ValueError(f"cell must be positive, got {cell}")
    if image_h % cell or image_w % cell:
        raise ValueError(f"image {image_h}x{image_w} is not divisible into {cell}-pixel cells")
    if image_h < cell or image_w < cell:
        raise ValueError(f"image {image_h}x{image_w} smaller than one cell")
    return AnchorGrid(image_h // cell, image_w // cell, cell)


def encode_box(box: Box, anchor: Box) -> BoxParam:
    if box.w <= 0 or box.h <= 0 or anchor.w <= 0 or anchor.h <= 0:
        raise ValueError("encode_box needs positive box and anchor sizes")
    return BoxParam(
        (box.x - anchor.x) / anchor.w,
        (box.y - anchor.y) / anchor.h,
        math.log(box.w / anchor.w),
        math.log(box.h / anchor.h),
    )


def decode_box(param: BoxParam, anchor: Box, class_id: int = 0, frame: int = 0) -> Box:
    return Box(
        anchor.x + param.t_x * anchor.w,
        anchor.y + param.t_y * anchor.h,
        anchor.w * math.exp(param.t_w),
        anchor.h * math.exp(param.t_h),
        class_id,
        frame,
    )


def decode_grid(params: np.ndarray, grid: AnchorGrid) -> np.ndarray:
    """Decode a [4, ..., rows, cols] array of t-values to (x, y, w, h) arrays."""
    ax, ay = grid.centers()
    c = float(grid.cell)
    tx, ty, tw, th = params
    return np.stack([ax + tx * c, ay + ty * c, c * np.exp(tw), c * np.exp(th)])


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # rounding can push identical boxes a few ulps above 1
    return min(inter / (a.area + b.area - inter), 1.0)


@dataclass
class TargetMap:
    """Per-cell supervision for the labeled frames of one sample.

    ``obj`` is [T, rows, cols]; ``params`` [4, T, rows, cols];
    ``class_onehot`` [K, T, rows, cols]. ``params`` and ``class_onehot`` are
    zero wherever ``obj`` is zero.
    """

    labeled_frames: tuple[int, ...]
    obj: np.ndarray
    params: np.ndarray
    class_onehot: np.ndarray
    boxes: list[Box]
    collisions: int = 0

    @property
    def noobj(self) -> np.ndarray:
        return 1.0 - self.obj

    @property
    def class_ids(self) -> np.ndarray:
        """[T, rows, cols] class id at object cells, -1 elsewhere."""
        ids = np.argmax(self.class_onehot, axis=0)
        return np.where(self.obj > 0, ids, -1)


def assign_targets(
    gt_boxes: Iterable[Box], grid: AnchorGrid, labeled_frames: Sequence[int], num_classes: int = 4
) -> TargetMap:
    """Give each ground-truth box to the cell containing its center.

    When several boxes land in one cell the largest-area box wins and the
    collision is counted.
    """
    frames = tuple(int(f) for f in labeled_frames)
    slot = {f: i for i, f in enumerate(frames)}
    chosen: dict[tuple[int, int, int], Box] = {}
    collisions = 0
    for box in gt_boxes:
        if box.frame not in slot:
            raise ValueError(f"box on frame {box.frame} but labeled frames are {list(frames)}")
        if not 0 <= box.class_id < num_classes:
            raise ValueError(f"class_id {box.class_id} outside [0, {num_classes})")
        r, c = grid.cell_of(box.x, box.y)
        key = (slot[box.frame], r, c)
        if key in chosen:
            collisions += 1
            if box.area > chosen[key].area:
                chosen[key] = box
        else:
            chosen[key] = box
    if collisions:
        log.warning("%d ground-truth boxes shared a cell with a larger box and were dropped", collisions)

    t = len(frames)
    obj = np.zeros((t, grid.rows, grid.cols))
    params = np.zeros((4, t, grid.rows, grid.cols))
    onehot = np.zeros((num_classes, t, grid.rows, grid.cols))
    for (k, r, c), box in sorted(chosen.items()):
        obj[k, r, c] = 1.0
        params[:, k, r, c] = encode_box(box, grid.anchor(r, c)).as_tuple()
        onehot[box.class_id, k, r, c] = 1.0
    return TargetMap(frames, obj, params, onehot, [chosen[k] for k in sorted(chosen)], collisions)
