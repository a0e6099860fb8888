"""Font sources: built-in bitmap styles, TrueType files, and glyph-PNG dirs.

A FontSource renders one label (a character, or a word composed from its
characters) into a square GrayImage cell with the glyph centered and its
height filling ~80% of the cell. Rendering is deterministic: the same
(font, label, size) always yields bit-identical pixels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from . import bitmap_font
from .core import GlyphMissing, GrayImage, ink_bbox, read_png, resize_bilinear

GLYPH_FILL_FRAC = 0.8


def _place_in_cell(ink: np.ndarray, size: int) -> GrayImage:
    """Center a float ink map (1 = full ink) in a white size x size cell.

    The resampled ink passes through a contrast curve so edge ramps stay
    about a pixel wide, matching how hinted font rasterization looks.
    """
    h, w = ink.shape
    target_h = max(2, round(size * GLYPH_FILL_FRAC))
    target_w = max(1, round(w * target_h / h))
    if target_w > size - 2:
        target_w = size - 2
        target_h = max(2, round(h * target_w / w))
    glyph = resize_bilinear(GrayImage(1.0 - np.clip(ink, 0.0, 1.0)), target_w, target_h)
    sharp = np.clip((glyph.array - 0.25) / 0.5, 0.0, 1.0)
    canvas = np.full((size, size), 1.0, dtype=np.float64)
    oy = (size - target_h) // 2
    ox = (size - target_w) // 2
    canvas[oy : oy + target_h, ox : ox + target_w] = sharp
    return GrayImage(canvas)


class FontSource:
    """Interface: deterministic per-label rasterizer."""

    font_id: str

    def can_render(self, label: str) -> bool:
        raise NotImplementedError

    def render(self, label: str, size: int) -> GrayImage:
        """Render a single-character label into a size x size cell."""
        raise NotImplementedError


class BitmapFont(FontSource):
    """One of the built-in hand-drawn pixel styles."""

    def __init__(self, style: str = "regular") -> None:
        if style not in bitmap_font.BUILTIN_STYLES:
            raise KeyError(f"unknown builtin style {style!r}")
        self.style = style
        self.font_id = f"builtin:{style}"

    def can_render(self, label: str) -> bool:
        return len(label) == 1 and not label.isspace() and label in bitmap_font.glyph_labels()

    def render(self, label: str, size: int) -> GrayImage:
        _check_renderable(self, label, size)
        grid = bitmap_font.styled_grid(label, self.style)
        return _place_in_cell(grid.astype(np.float64), size)


class TrueTypeFont(FontSource):
    """A scalable font file (TTF/OTF) rasterized through Pillow."""

    def __init__(self, path, font_id: str | None = None) -> None:
        self.path = Path(path)
        if not self.path.is_file():
            raise FileNotFoundError(f"font file not found: {self.path}")
        self.font_id = font_id or f"ttf:{self.path.stem}"
        self._cache: dict[int, ImageFont.FreeTypeFont] = {}

    def _font(self, px: int) -> ImageFont.FreeTypeFont:
        if px not in self._cache:
            self._cache[px] = ImageFont.truetype(str(self.path), px)
        return self._cache[px]

    def _raster(self, label: str, px: int) -> np.ndarray | None:
        font = self._font(px)
        pad = px
        canvas = Image.new("L", (4 * px + 2 * pad, 2 * px + 2 * pad), 0)
        ImageDraw.Draw(canvas).text((pad, pad), label, fill=255, font=font)
        arr = np.asarray(canvas, dtype=np.float64) / 255.0
        if arr.max() <= 0.0:
            return None
        box = ink_bbox(GrayImage(1.0 - arr), threshold=0.5)
        if box is None:
            return None
        return arr[box.y0 : box.y1, box.x0 : box.x1]

    def can_render(self, label: str) -> bool:
        if len(label) != 1 or label.isspace():
            return False
        return self._raster(label, 24) is not None

    def render(self, label: str, size: int) -> GrayImage:
        _check_renderable(self, label, size)
        ink = self._raster(label, max(16, size * 2))
        if ink is None:
            raise GlyphMissing(f"{self.font_id} cannot render {label!r}")
        return _place_in_cell(ink, size)


class GlyphDirFont(FontSource):
    """A directory of pre-rendered per-glyph PNGs keyed by codepoint.

    The file for character c is `{ord(c):04x}.png`, dark ink on light
    background.
    """

    def __init__(self, directory, font_id: str | None = None) -> None:
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"glyph directory not found: {self.directory}")
        self.font_id = font_id or f"dir:{self.directory.name}"

    def _glyph_path(self, label: str) -> Path:
        return self.directory / f"{ord(label):04x}.png"

    def can_render(self, label: str) -> bool:
        return len(label) == 1 and not label.isspace() and self._glyph_path(label).is_file()

    def render(self, label: str, size: int) -> GrayImage:
        _check_renderable(self, label, size)
        img = read_png(self._glyph_path(label))
        box = ink_bbox(img)
        if box is None:
            raise GlyphMissing(f"{self.font_id}: glyph file for {label!r} is blank")
        ink = 1.0 - img.array[box.y0 : box.y1, box.x0 : box.x1]
        return _place_in_cell(ink, size)


def _check_renderable(font: FontSource, label: str, size: int) -> None:
    if size < 8:
        raise ValueError(f"glyph size must be >= 8, got {size}")
    if len(label) != 1:
        raise GlyphMissing(f"expected a single character, got {label!r}")
    if label.isspace():
        raise GlyphMissing("whitespace is inferred geometrically, never rendered")
    if not font.can_render(label):
        raise GlyphMissing(f"{font.font_id} cannot render {label!r}")


def builtin_fonts() -> dict[str, BitmapFont]:
    """All built-in styles keyed by font id."""
    return {f.font_id: f for f in (BitmapFont(s) for s in bitmap_font.BUILTIN_STYLES)}


def open_font(spec: str) -> FontSource:
    """Resolve a font spec string.

    `builtin:<style>` selects an embedded style; a path ending in .ttf/.otf
    opens a scalable font; a directory path opens a glyph-PNG directory.
    """
    if spec.startswith("builtin:"):
        return BitmapFont(spec.split(":", 1)[1])
    path = Path(spec)
    if path.is_dir():
        return GlyphDirFont(path)
    if path.suffix.lower() in (".ttf", ".otf"):
        return TrueTypeFont(path)
    raise FileNotFoundError(f"cannot interpret font spec {spec!r}")
