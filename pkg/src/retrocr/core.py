"""Core pixel and geometry primitives shared by the whole pipeline.

Intensity convention everywhere: 0.0 is ink (black), 1.0 is background
(white). Coordinates are integer pixels with the origin at the top-left.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
from PIL import Image


class RetrocrError(Exception):
    """Base class for every error this package raises deliberately."""


class BoundsError(RetrocrError):
    """A box reaches outside its host image or has no extent."""


class ShapeError(RetrocrError):
    """An array, crop, or gradient has the wrong dimensions."""


class GlyphMissing(RetrocrError):
    """A font cannot render the requested label."""


class IncompatibleModel(RetrocrError):
    """A stored fingerprint does not match the model in use."""


class FormatError(RetrocrError):
    """A weight or index file is corrupt or truncated."""


class DegenerateBatch(RetrocrError):
    """A contrastive batch carries no usable positive/negative structure."""


class MissingClass(RetrocrError):
    """The training set has no crops for a catalog class."""


class NonFiniteGradient(RetrocrError):
    """A gradient contained NaN or infinity; the update was aborted."""


class EmptyCatalog(RetrocrError):
    """The operation needs at least one catalog class."""


class UndefinedMetric(RetrocrError):
    """The metric is undefined for this input (e.g. empty ground truth)."""


class Unsupported(RetrocrError):
    """The requested mode is not available for this input."""


class GrayImage:
    """Immutable grayscale raster backed by a write-protected float array.

    The backing array has shape (height, width), dtype float64, and every
    value in [0, 1]. Instances are safe to share across worker threads.
    """

    __slots__ = ("array",)

    def __init__(self, array) -> None:
        arr = np.array(array, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"expected a non-empty 2-D raster, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("pixel values must be finite")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < -1e-12 or hi > 1.0 + 1e-12:
            raise ValueError(f"pixel values must lie in [0, 1], got [{lo:g}, {hi:g}]")
        np.clip(arr, 0.0, 1.0, out=arr)
        arr.setflags(write=False)
        self.array = arr

    def __setattr__(self, name, value):
        if hasattr(self, "array"):
            raise AttributeError("GrayImage is immutable")
        object.__setattr__(self, name, value)

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def pixels(self) -> np.ndarray:
        """Row-major flat view of the raster."""
        return self.array.reshape(-1)

    @classmethod
    def blank(cls, width: int, height: int, value: float = 1.0) -> "GrayImage":
        return cls(np.full((height, width), value, dtype=np.float64))

    def __eq__(self, other) -> bool:
        return isinstance(other, GrayImage) and np.array_equal(self.array, other.array)

    def __hash__(self):
        return hash((self.width, self.height, self.array.tobytes()))

    def __repr__(self) -> str:
        return f"GrayImage({self.width}x{self.height})"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box: x in [x0, x1), y in [y0, y1), x0 < x1, y0 < y1."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise BoundsError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    @classmethod
    def from_floats(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        """Round sub-pixel coordinates to the nearest integer pixel."""
        return cls(round(x0), round(y0), round(x1), round(y1))

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def translated(self, dx: int, dy: int) -> "BBox":
        return BBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def union(self, other: "BBox") -> "BBox":
        return BBox(
            min(self.x0, other.x0),
            min(self.y0, other.y0),
            max(self.x1, other.x1),
            max(self.y1, other.y1),
        )

    def intersection_area(self, other: "BBox") -> int:
        iw = min(self.x1, other.x1) - max(self.x0, other.x0)
        ih = min(self.y1, other.y1) - max(self.y0, other.y0)
        return iw * ih if iw > 0 and ih > 0 else 0

    def contains_point(self, x: float, y: float) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1


class TextDirection(Enum):
    HORIZONTAL_LTR = "horizontal"
    VERTICAL_TTB = "vertical"

    @property
    def horizontal(self) -> bool:
        return self is TextDirection.HORIZONTAL_LTR


CROP_SOURCES = ("font-render", "target-annotation", "silver")


class GlyphCatalog:
    """Dense, gap-free class-id <-> label mapping for a character or word set."""

    def __init__(self, labels: Iterable[str]) -> None:
        labels = tuple(labels)
        if not labels:
            raise EmptyCatalog("catalog needs at least one label")
        seen = {}
        for i, label in enumerate(labels):
            if not isinstance(label, str) or len(label) < 1:
                raise ValueError(f"label at position {i} must be a non-empty string")
            if label in seen:
                raise ValueError(f"duplicate label {label!r}")
            seen[label] = i
        self._labels = labels
        self._ids = seen

    @classmethod
    def caseless_alphanumeric(cls) -> "GlyphCatalog":
        """The 36-class digits-plus-lowercase-letters catalog."""
        return cls("0123456789abcdefghijklmnopqrstuvwxyz")

    @classmethod
    def from_file(cls, path) -> "GlyphCatalog":
        """One label per line; blank lines ignored."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line.strip() for line in lines if line.strip())

    def label(self, class_id: int) -> str:
        if not 0 <= class_id < len(self._labels):
            raise KeyError(f"class_id {class_id} outside catalog of {len(self._labels)}")
        return self._labels[class_id]

    def class_id(self, label: str) -> int:
        try:
            return self._ids[label]
        except KeyError:
            raise KeyError(f"label {label!r} not in catalog") from None

    @property
    def labels(self) -> tuple[str, ...]:
        return self._labels

    @property
    def digest(self) -> str:
        h = hashlib.sha256("\x1f".join(self._labels).encode("utf-8"))
        return h.hexdigest()

    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def __iter__(self) -> Iterator[str]:
        return iter(self._labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, GlyphCatalog) and self._labels == other._labels


@dataclass(frozen=True)
class LabeledCrop:
    """A glyph or word image paired with its catalog class."""

    image: GrayImage
    class_id: int
    source: str
    aug_seed: Optional[int] = None

    def __post_init__(self):
        if self.source not in CROP_SOURCES:
            raise ValueError(f"source must be one of {CROP_SOURCES}, got {self.source!r}")
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")


def crop(image: GrayImage, box: BBox) -> GrayImage:
    """Copy the pixels of `box` out of `image`."""
    if box.x0 < 0 or box.y0 < 0 or box.x1 > image.width or box.y1 > image.height:
        raise BoundsError(
            f"box ({box.x0},{box.y0},{box.x1},{box.y1}) outside {image.width}x{image.height} image"
        )
    return GrayImage(image.array[box.y0 : box.y1, box.x0 : box.x1])


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def resize_bilinear(image: GrayImage, width: int, height: int) -> GrayImage:
    """Resample to (width, height) with bilinear interpolation."""
    if width < 1 or height < 1:
        raise ShapeError("target dimensions must be positive")
    src = image.array
    if (image.width, image.height) == (width, height):
        return GrayImage(src)
    ys = (np.arange(height) + 0.5) * image.height / height - 0.5
    xs = (np.arange(width) + 0.5) * image.width / width - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, image.height - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, image.width - 1)
    y1 = np.clip(y0 + 1, 0, image.height - 1)
    x1 = np.clip(x0 + 1, 0, image.width - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = src[y0[:, None], x0[None, :]] * (1 - wx) + src[y0[:, None], x1[None, :]] * wx
    bot = src[y1[:, None], x0[None, :]] * (1 - wx) + src[y1[:, None], x1[None, :]] * wx
    out = top * (1 - wy) + bot * wy
    return GrayImage(np.clip(out, 0.0, 1.0))


def pad_to_square(image: GrayImage, fill: float = 1.0) -> GrayImage:
    """Center the raster in a square canvas of its longer side."""
    side = max(image.width, image.height)
    if image.width == image.height:
        return image
    canvas = np.full((side, side), fill, dtype=np.float64)
    oy = (side - image.height) // 2
    ox = (side - image.width) // 2
    canvas[oy : oy + image.height, ox : ox + image.width] = image.array
    return GrayImage(canvas)


def ink_bbox(image: GrayImage, threshold: float = 0.5) -> Optional[BBox]:
    """Tight box around pixels darker than `threshold`, or None if blank."""
    mask = image.array < threshold
    if not mask.any():
        return None
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def normalize_crop(
    image: GrayImage, out_size: int = 32, fill_frac: float = 0.8, fill: float = 1.0
) -> GrayImage:
    """Standard recognizer input prep: pad to a square with headroom, resize.

    The content is centered in a square whose side is max(w, h) / fill_frac,
    so glyph ink fills roughly `fill_frac` of the output, matching the
    margins used when rendering exemplars.
    """
    side = max(image.width, image.height)
    target = max(out_size // 4, round(side / fill_frac))
    canvas = np.full((target, target), fill, dtype=np.float64)
    oy = (target - image.height) // 2
    ox = (target - image.width) // 2
    canvas[oy : oy + image.height, ox : ox + image.width] = image.array
    return resize_bilinear(GrayImage(canvas), out_size, out_size)


def write_png(image: GrayImage, path) -> None:
    """Store as 8-bit grayscale PNG; pixel p maps to intensity p/255."""
    data = np.round(image.array * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(Path(path), format="PNG")


def read_png(path) -> GrayImage:
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return GrayImage(arr)
