"""Slide geometry: detector-space boxes, full-resolution crops, pooled features.

The detector runs on a downsampled copy of the slide image; its boxes are
mapped back to full resolution by an isotropic scale factor (3328 / 416 = 8
for the default slide).
"""

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import BadValue, GeometryError, OutOfBounds, ParseError

# ceil() guard against products such as 10 * 1.1 = 11.000000000000002
_CEIL_SLACK = 1e-9


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    index: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"box {self.index}: w and h must be positive")
        if self.x < 0 or self.y < 0:
            raise GeometryError(f"box {self.index}: x and y must be non-negative")

    @property
    def center(self):
        return (self.x + self.w / 2, self.y + self.h / 2)


@dataclass(frozen=True)
class SlideGeometry:
    full_width: int = 3328
    full_height: int = 3328
    det_width: int = 416
    det_height: int = 416

    def __post_init__(self):
        dims = (self.full_width, self.full_height, self.det_width, self.det_height)
        if any(int(v) != v or v <= 0 for v in dims):
            raise GeometryError(f"image dimensions must be positive integers, got {dims}")
        # exact integer comparison: fw/dw == fh/dh
        if self.full_width * self.det_height != self.full_height * self.det_width:
            raise GeometryError(
                f"non-isotropic geometry: {self.full_width}/{self.det_width} != "
                f"{self.full_height}/{self.det_height}"
            )
        if self.full_width < self.det_width:
            raise GeometryError("full-resolution image is smaller than the detector input")

    @property
    def scale(self):
        return self.full_width / self.det_width


@dataclass(frozen=True)
class CropRect:
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


def scale_box(b: BoundingBox, g: SlideGeometry) -> BoundingBox:
    """Map a detector-space box to full resolution (every component times ``g.scale``)."""
    if b.x + b.w > g.det_width or b.y + b.h > g.det_height:
        raise OutOfBounds(
            f"box {b.index} ({b.x}, {b.y}, {b.w}, {b.h}) exceeds detector bounds "
            f"{g.det_width}x{g.det_height}"
        )
    s = g.scale
    return replace(b, x=b.x * s, y=b.y * s, w=b.w * s, h=b.h * s)


def centered_crop(b_full: BoundingBox, g: SlideGeometry, pad_frac: float = 0.1) -> CropRect:
    """Square crop centered on ``b_full``, translated (never shrunk) into the image.

    The side is ``ceil(max(w, h) * (1 + pad_frac))``, clamped to the shorter
    image side.
    """
    if pad_frac < 0:
        raise GeometryError("pad_frac must be >= 0")
    side = math.ceil(max(b_full.w, b_full.h) * (1.0 + pad_frac) - _CEIL_SLACK)
    side = max(1, min(side, g.full_width, g.full_height))
    cx, cy = b_full.center
    x0 = math.floor(cx - side / 2 + 0.5)
    y0 = math.floor(cy - side / 2 + 0.5)
    x0 = min(max(x0, 0), g.full_width - side)
    y0 = min(max(y0, 0), g.full_height - side)
    return CropRect(x0, y0, x0 + side, y0 + side)


def max_pool_channels(feature_map) -> np.ndarray:
    """Global max over the spatial axes of an H x W x C feature map."""
    fm = np.asarray(feature_map, dtype=float)
    if fm.ndim != 3 or min(fm.shape) < 1:
        raise GeometryError(f"expected an H x W x C array, got shape {fm.shape}")
    if not np.all(np.isfinite(fm)):
        raise BadValue("feature map contains NaN or Inf")
    return fm.max(axis=(0, 1))


def read_boxes(path):
    """Read detector boxes from a CSV with header ``index,x,y,w,h``."""
    boxes = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"index", "x", "y", "w", "h"}:
            raise ParseError(f"{path}: header must be index,x,y,w,h")
        for r, rec in enumerate(reader, start=1):
            try:
                boxes.append(
                    BoundingBox(
                        float(rec["x"]), float(rec["y"]), float(rec["w"]), float(rec["h"]),
                        int(rec["index"]),
                    )
                )
            except ValueError as exc:
                raise ParseError(str(exc), row=r) from None
    return boxes
