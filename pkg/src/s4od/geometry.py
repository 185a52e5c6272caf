"""Box arithmetic, IoU, and the rotate/flip/crop transform algebra.

Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner, in continuous
pixel coordinates.  Areas are ``w * h``; there is no +1 pixel convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

CROP_RATIO = 0.9
ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive width and height, got {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def within(self, W: float, H: float) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= W and self.y2 <= H


def _overlap(a0, aw, b0, bw):
    # when one interval contains the other, its own width is the exact overlap
    lo = np.maximum(a0, b0)
    hi = np.minimum(a0 + aw, b0 + bw)
    a_in = (a0 >= b0) & (a0 + aw <= b0 + bw)
    b_in = (b0 >= a0) & (b0 + bw <= a0 + aw)
    out = np.where(a_in, aw, np.where(b_in, bw, hi - lo))
    return np.maximum(np.minimum(out, np.minimum(aw, bw)), 0.0)


def iou(a: BBox, b: BBox) -> float:
    inter = float(_overlap(a.x, a.w, b.x, b.w) * _overlap(a.y, a.h, b.y, b.h))
    if inter <= 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=float)
    return arr.reshape(-1, 4)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` / ``(M, 4)`` arrays of xywh boxes."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = _overlap(a[:, None, 0], a[:, None, 2], b[None, :, 0], b[None, :, 2])
    ih = _overlap(a[:, None, 1], a[:, None, 3], b[None, :, 1], b[None, :, 3])
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


def normalize_box(b: BBox, W: int, H: int) -> tuple[float, float, float, float]:
    return (b.x / W, b.y / H, b.w / W, b.h / H)


@dataclass(frozen=True)
class Transform:
    """Rotate (counter-clockwise) by ``rotation`` degrees, then flip, then crop.

    ``crop`` is given in the coordinates of the rotated and flipped image and
    has integer offsets and size.
    """

    rotation: int = 0
    hflip: bool = False
    crop: Optional[BBox] = None

    def __post_init__(self):
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}, got {self.rotation}")

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0 and not self.hflip and self.crop is None


IDENTITY = Transform()


def rotated_size(W: int, H: int, rotation: int) -> tuple[int, int]:
    return (H, W) if rotation in (90, 270) else (W, H)


def output_size(t: Transform, W: int, H: int) -> tuple[int, int]:
    if t.crop is not None:
        return int(t.crop.w), int(t.crop.h)
    return rotated_size(W, H, t.rotation)


def crop_size(W: int, H: int) -> tuple[int, int]:
    # round half up; Python's round() would send 22.5 to 22
    return int(math.floor(CROP_RATIO * W + 0.5)), int(math.floor(CROP_RATIO * H + 0.5))


def _rot90_box(x, y, w, h, W):
    # counter-clockwise quarter turn of a W-wide image: (px, py) -> (py, W - px)
    return y, W - x - w, h, w


def rotate_flip_box(b: BBox, rotation: int, hflip: bool, W: int, H: int) -> BBox:
    x, y, w, h = b.as_tuple()
    cw, ch = W, H
    for _ in range(rotation // 90):
        x, y, w, h = _rot90_box(x, y, w, h, cw)
        cw, ch = ch, cw
    if hflip:
        x = cw - x - w
    return BBox(x, y, w, h)


def transform_box(b: BBox, t: Transform, W: int, H: int) -> Optional[BBox]:
    """Map ``b`` into the output frame of ``t``.

    Returns ``None`` when the crop removes more than half of the box area.
    Boxes that keep at least half their area are clipped to the window.
    """
    out = rotate_flip_box(b, t.rotation, t.hflip, W, H)
    if t.crop is None:
        return out
    c = t.crop
    x1 = max(out.x, c.x)
    y1 = max(out.y, c.y)
    x2 = min(out.x2, c.x2)
    y2 = min(out.y2, c.y2)
    if x2 <= x1 or y2 <= y1:
        return None
    # sides the window does not cut keep their exact extent
    w = out.w if out.x >= c.x and out.x2 <= c.x2 else x2 - x1
    h = out.h if out.y >= c.y and out.y2 <= c.y2 else y2 - y1
    if w * h < 0.5 * out.area:
        return None
    return BBox(x1 - c.x, y1 - c.y, w, h)


def transform_boxes(boxes: Sequence[BBox], t: Transform, W: int, H: int) -> list[Optional[BBox]]:
    return [transform_box(b, t, W, H) for b in boxes]


def transform_image(img: np.ndarray, t: Transform) -> np.ndarray:
    """Apply ``t`` to an ``H x W [x C]`` grid.  Quarter turns permute cells exactly."""
    out = np.rot90(img, k=t.rotation // 90, axes=(0, 1))
    if t.hflip:
        out = out[:, ::-1]
    if t.crop is not None:
        c = t.crop
        x0, y0 = int(c.x), int(c.y)
        out = out[y0:y0 + int(c.h), x0:x0 + int(c.w)]
    return np.ascontiguousarray(out)


def crop_placements(protected: Sequence[BBox], W: int, H: int) -> tuple[range, range]:
    """Integer offsets of a crop window (in a ``W x H`` frame) containing every protected box."""
    cw, ch = crop_size(W, H)
    lo_x, hi_x = 0, W - cw
    lo_y, hi_y = 0, H - ch
    for b in protected:
        # window [cx, cx+cw] must contain [b.x, b.x2]
        lo_x = max(lo_x, math.ceil(b.x2 - cw))
        hi_x = min(hi_x, math.floor(b.x))
        lo_y = max(lo_y, math.ceil(b.y2 - ch))
        hi_y = min(hi_y, math.floor(b.y))
    return range(lo_x, hi_x + 1), range(lo_y, hi_y + 1)


def sample_transform(rng: np.random.Generator, protected: Sequence[BBox], W: int, H: int) -> Transform:
    """Draw a rotation, a flip, and a crop window that keeps every protected box whole.

    The crop is omitted when no window of the fixed ratio fits all protected boxes.
    """
    rotation = ROTATIONS[int(rng.integers(4))]
    hflip = bool(rng.integers(2))
    Wr, Hr = rotated_size(W, H, rotation)
    moved = [rotate_flip_box(b, rotation, hflip, W, H) for b in protected]
    xs, ys = crop_placements(moved, Wr, Hr)
    if len(xs) == 0 or len(ys) == 0:
        return Transform(rotation, hflip, None)
    cw, ch = crop_size(Wr, Hr)
    cx = xs[int(rng.integers(len(xs)))]
    cy = ys[int(rng.integers(len(ys)))]
    return Transform(rotation, hflip, BBox(float(cx), float(cy), float(cw), float(ch)))


def flip_transform() -> Transform:
    return Transform(0, True, None)
