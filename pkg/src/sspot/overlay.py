"""Binary PPM (P6) overlays: one channel as grey levels with boxes drawn on top."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import Box

GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)


def to_grey(field: np.ndarray) -> np.ndarray:
    """Min-max scale a 2D field to an RGB uint8 image."""
    f = np.asarray(field, dtype=np.float64)
    lo, hi = float(f.min()), float(f.max())
    scaled = np.zeros_like(f) if hi == lo else (f - lo) / (hi - lo)
    grey = np.round(scaled * 255).astype(np.uint8)
    return np.repeat(grey[:, :, None], 3, axis=2)


def box_pixels(box: Box, shape: tuple[int, int]) -> tuple[int, int, int, int] | None:
    """Pixel rows/cols (top, left, bottom, right) of a box's outline, clipped; None if off-image."""
    h, w = shape
    x0, y0, x1, y1 = box.corners
    left, right = int(np.floor(x0)), int(np.ceil(x1)) - 1
    top, bottom = int(np.floor(y0)), int(np.ceil(y1)) - 1
    if right < 0 or bottom < 0 or left >= w or top >= h:
        return None
    return max(top, 0), max(left, 0), min(bottom, h - 1), min(right, w - 1)


def draw_box(img: np.ndarray, box: Box, color: tuple[int, int, int]) -> None:
    px = box_pixels(box, img.shape[:2])
    if px is None:
        return
    top, left, bottom, right = px
    img[top, left: right + 1] = color
    img[bottom, left: right + 1] = color
    img[top: bottom + 1, left] = color
    img[top: bottom + 1, right] = color


def render_overlay(field: np.ndarray, gt: Iterable[Box], predicted: Iterable[Box]) -> np.ndarray:
    img = to_grey(field)
    for b in gt:
        draw_box(img, b, GT_COLOR)
    # predictions last so they stay visible where outlines coincide
    for b in predicted:
        draw_box(img, b, PRED_COLOR)
    return img


def write_ppm(path: str | Path, img: np.ndarray) -> Path:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected an [H, W, 3] uint8 image, got {img.dtype} {list(img.shape)}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos + 1: pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
