"""Box algebra: anchor-relative delta coding, IoU, flips and anchor correspondence.

Coordinates are continuous pixels: an image spans ``[0, W] x [0, H]`` and the
mirror of ``x`` is ``W - x``. Boxes are ``(cx, cy, w, h)``; deltas are
``(dcx, dcy, dw, dh)`` with center offsets normalized by the anchor extent and
log-scale size ratios. Functions accept single 4-vectors or ``(..., 4)`` arrays.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError


class BoxCWH(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


class DeltaBox(NamedTuple):
    dcx: float
    dcy: float
    dw: float
    dh: float


class FlipKind(enum.Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    ROTATE180 = "rotate180"

    @property
    def mirrors_x(self) -> bool:
        return self is not FlipKind.VERTICAL

    @property
    def mirrors_y(self) -> bool:
        return self is not FlipKind.HORIZONTAL

    def delta_signs(self) -> np.ndarray:
        """Per-component sign that maps a delta to its flipped counterpart."""
        return np.array([-1.0 if self.mirrors_x else 1.0,
                         -1.0 if self.mirrors_y else 1.0, 1.0, 1.0])


FLIP_KINDS = (FlipKind.HORIZONTAL, FlipKind.VERTICAL, FlipKind.ROTATE180)


def encode(box, anchor) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(anchor[..., 2:] <= 0) or np.any(box[..., 2:] <= 0):
        raise DomainError("encode: box and anchor extents must be positive")
    out = np.empty(np.broadcast_shapes(box.shape, anchor.shape))
    out[..., 0] = (box[..., 0] - anchor[..., 0]) / anchor[..., 2]
    out[..., 1] = (box[..., 1] - anchor[..., 1]) / anchor[..., 3]
    out[..., 2] = np.log(box[..., 2] / anchor[..., 2])
    out[..., 3] = np.log(box[..., 3] / anchor[..., 3])
    return out


def decode(delta, anchor) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(delta.shape, anchor.shape))
    out[..., 0] = anchor[..., 0] + delta[..., 0] * anchor[..., 2]
    out[..., 1] = anchor[..., 1] + delta[..., 1] * anchor[..., 3]
    out[..., 2] = anchor[..., 2] * np.exp(delta[..., 2])
    out[..., 3] = anchor[..., 3] * np.exp(delta[..., 3])
    return out


def flip_image(image: np.ndarray, kind: FlipKind) -> np.ndarray:
    """Mirror a ``C x H x W`` (or ``N x C x H x W``) array; returns a copy."""
    image = np.asarray(image)
    if kind is FlipKind.HORIZONTAL:
        return image[..., ::-1].copy()
    if kind is FlipKind.VERTICAL:
        return image[..., ::-1, :].copy()
    return image[..., ::-1, ::-1].copy()


def flip_box(box, kind: FlipKind, image_size) -> np.ndarray:
    """``image_size`` is ``(H, W)``."""
    h, w = image_size
    out = np.array(box, dtype=np.float64)
    if kind.mirrors_x:
        out[..., 0] = w - out[..., 0]
    if kind.mirrors_y:
        out[..., 1] = h - out[..., 1]
    return out


def flip_delta(delta, kind: FlipKind) -> np.ndarray:
    return np.asarray(delta, dtype=np.float64) * kind.delta_signs()


@dataclass(frozen=True)
class AnchorGrid:
    grid_size: int
    stride: int
    anchor_shapes: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.grid_size < 1 or self.stride < 1 or not self.anchor_shapes:
            raise ValueError("AnchorGrid needs grid_size >= 1, stride >= 1 and at least one shape")

    @property
    def image_size(self) -> int:
        return self.grid_size * self.stride

    @property
    def num_shapes(self) -> int:
        return len(self.anchor_shapes)

    @property
    def num_anchors(self) -> int:
        return self.grid_size * self.grid_size * self.num_shapes

    def anchors(self) -> np.ndarray:
        """``K x 4`` anchor boxes in row-major ``(i, j, shape)`` order (read-only)."""
        return _anchor_boxes(self)


@functools.lru_cache(maxsize=64)
def _anchor_boxes(grid: AnchorGrid) -> np.ndarray:
    s, a = grid.grid_size, grid.num_shapes
    i, j, k = np.meshgrid(np.arange(s), np.arange(s), np.arange(a), indexing="ij")
    shapes = np.asarray(grid.anchor_shapes, dtype=np.float64)
    out = np.empty((s, s, a, 4))
    out[..., 0] = (j + 0.5) * grid.stride
    out[..., 1] = (i + 0.5) * grid.stride
    out[..., 2] = shapes[k, 0]
    out[..., 3] = shapes[k, 1]
    out = out.reshape(-1, 4)
    out.flags.writeable = False
    return out


def anchor_permutation(grid: AnchorGrid, kind: FlipKind) -> np.ndarray:
    """Index map ``k -> k'`` sending each anchor to its mirror image."""
    s, a = grid.grid_size, grid.num_shapes
    i, j, k = np.meshgrid(np.arange(s), np.arange(s), np.arange(a), indexing="ij")
    if kind.mirrors_x:
        j = s - 1 - j
    if kind.mirrors_y:
        i = s - 1 - i
    return ((i * s + j) * a + k).reshape(-1)


def corners(box) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    half = box[..., 2:] / 2
    return np.concatenate([box[..., :2] - half, box[..., :2] + half], axis=-1)


def from_corners(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, c[..., 2:] - c[..., :2]], axis=-1)


def iou(a, b) -> float:
    return float(iou_matrix(np.asarray(a, dtype=np.float64)[None], np.asarray(b, dtype=np.float64)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``M x 4`` and ``N x 4`` CWH boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ca, cb = corners(a)[:, None, :], corners(b)[None, :, :]
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0, None)
    inter = iw * ih
    # areas from corners so that identical boxes give exactly 1
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
