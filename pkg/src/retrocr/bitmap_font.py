"""Hand-drawn pixel glyphs plus derived style variants.

Ships inside the package so rendering, training, and the test suite run with
zero font files installed. Seven visually distinct styles are produced from
the same 10x12 base grids by deterministic transforms (dilation, shear,
horizontal rescaling), giving a usable multi-font training corpus.

Letterforms are caseless: capitals for most letters, dotted lowercase shapes
for i and j (their detached dots exercise the localizer's merge rule). The
zero carries a slash and the one a flag and base so the classic homoglyph
pairs 0/o and 1/l stay separable.
"""

from __future__ import annotations

import numpy as np

from .core import GrayImage, resize_bilinear

# fmt: off
_GLYPHS: dict[str, tuple[str, ...]] = {
    "0": (
        "..######..",
        ".##....##.",
        "##......##",
        "##.....###",
        "##....####",
        "##...##.##",
        "##..##..##",
        "##.##...##",
        "####....##",
        "###.....##",
        ".##....##.",
        "..######..",
    ),
    "1": (
        "....##....",
        "...###....",
        "..####....",
        ".##.##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "..######..",
        "..######..",
    ),
    "2": (
        "..######..",
        ".##....##.",
        "##......##",
        "........##",
        "........##",
        ".......##.",
        "......##..",
        "....##....",
        "...##.....",
        ".##.......",
        "##........",
        "##########",
    ),
    "3": (
        "..######..",
        ".##....##.",
        "##......##",
        "........##",
        ".......##.",
        "...####...",
        ".......##.",
        "........##",
        "........##",
        "##......##",
        ".##....##.",
        "..######..",
    ),
    "4": (
        "......##..",
        ".....###..",
        "....####..",
        "...##.##..",
        "..##..##..",
        ".##...##..",
        "##....##..",
        "##########",
        "......##..",
        "......##..",
        "......##..",
        "......##..",
    ),
    "5": (
        "##########",
        "##........",
        "##........",
        "##........",
        "########..",
        "........##",
        "........##",
        "........##",
        "........##",
        "##......##",
        ".##....##.",
        "..######..",
    ),
    "6": (
        "..######..",
        ".##....##.",
        "##......##",
        "##........",
        "##........",
        "########..",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        ".##....##.",
        "..######..",
    ),
    "7": (
        "##########",
        "........##",
        ".......##.",
        ".......##.",
        "......##..",
        "......##..",
        ".....##...",
        ".....##...",
        "....##....",
        "....##....",
        "...##.....",
        "...##.....",
    ),
    "8": (
        "..######..",
        ".##....##.",
        "##......##",
        "##......##",
        ".##....##.",
        "..######..",
        ".##....##.",
        "##......##",
        "##......##",
        "##......##",
        ".##....##.",
        "..######..",
    ),
    "9": (
        "..######..",
        ".##....##.",
        "##......##",
        "##......##",
        "##......##",
        ".##.....##",
        "..########",
        "........##",
        "........##",
        "##......##",
        ".##....##.",
        "..######..",
    ),
    "a": (
        "....##....",
        "....##....",
        "...####...",
        "...####...",
        "..##..##..",
        "..##..##..",
        ".##....##.",
        ".########.",
        ".########.",
        "##......##",
        "##......##",
        "##......##",
    ),
    "b": (
        "########..",
        "##.....##.",
        "##......##",
        "##......##",
        "##.....##.",
        "########..",
        "##.....##.",
        "##......##",
        "##......##",
        "##......##",
        "##.....##.",
        "########..",
    ),
    "c": (
        "..######..",
        ".##....##.",
        "##......##",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##......##",
        ".##....##.",
        "..######..",
    ),
    "d": (
        "########..",
        "##.....##.",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##.....##.",
        "########..",
    ),
    "e": (
        "##########",
        "##........",
        "##........",
        "##........",
        "##........",
        "########..",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##########",
    ),
    "f": (
        "##########",
        "##........",
        "##........",
        "##........",
        "##........",
        "########..",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
    ),
    "g": (
        "..######..",
        ".##....##.",
        "##......##",
        "##........",
        "##........",
        "##........",
        "##....####",
        "##......##",
        "##......##",
        "##......##",
        ".##....##.",
        "..######..",
    ),
    "h": (
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##########",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
    ),
    "i": (
        "...###....",
        "...###....",
        "..........",
        "...###....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "..######..",
    ),
    "j": (
        "....###...",
        "....###...",
        "..........",
        "....###...",
        ".....##...",
        ".....##...",
        ".....##...",
        ".....##...",
        ".....##...",
        "##...##...",
        "##...##...",
        ".#####....",
    ),
    "k": (
        "##......##",
        "##.....##.",
        "##....##..",
        "##...##...",
        "##..##....",
        "#####.....",
        "##..##....",
        "##...##...",
        "##....##..",
        "##.....##.",
        "##......##",
        "##......##",
    ),
    "l": (
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##########",
    ),
    "m": (
        "##......##",
        "###....###",
        "####..####",
        "##.####.##",
        "##..##..##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
    ),
    "n": (
        "##......##",
        "###.....##",
        "####....##",
        "##.##...##",
        "##..##..##",
        "##...##.##",
        "##....####",
        "##.....###",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
    ),
    "o": (
        "..######..",
        ".##....##.",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        ".##....##.",
        "..######..",
    ),
    "p": (
        "########..",
        "##.....##.",
        "##......##",
        "##......##",
        "##.....##.",
        "########..",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
        "##........",
    ),
    "q": (
        "..######..",
        ".##....##.",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##...##.##",
        ".##...###.",
        "..######..",
        "........##",
    ),
    "r": (
        "########..",
        "##.....##.",
        "##......##",
        "##......##",
        "##.....##.",
        "########..",
        "##..##....",
        "##...##...",
        "##....##..",
        "##.....##.",
        "##......##",
        "##......##",
    ),
    "s": (
        "..######..",
        ".##....##.",
        "##......##",
        "##........",
        ".##.......",
        "..####....",
        ".....###..",
        ".......##.",
        "........##",
        "##......##",
        ".##....##.",
        "..######..",
    ),
    "t": (
        "##########",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
    ),
    "u": (
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        ".##....##.",
        "..######..",
    ),
    "v": (
        "##......##",
        "##......##",
        "##......##",
        ".##....##.",
        ".##....##.",
        ".##....##.",
        "..##..##..",
        "..##..##..",
        "..##..##..",
        "...####...",
        "...####...",
        "....##....",
    ),
    "w": (
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##......##",
        "##..##..##",
        "##..##..##",
        "##.####.##",
        "####..####",
        "###....###",
        "##......##",
    ),
    "x": (
        "##......##",
        ".##....##.",
        "..##..##..",
        "...####...",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "...####...",
        "..##..##..",
        ".##....##.",
        "##......##",
    ),
    "y": (
        "##......##",
        ".##....##.",
        "..##..##..",
        "...####...",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
        "....##....",
    ),
    "z": (
        "##########",
        "........##",
        ".......##.",
        "......##..",
        ".....##...",
        "....##....",
        "...##.....",
        "..##......",
        ".##.......",
        "##........",
        "##........",
        "##########",
    ),
    ".": (
        "..........",
        "..........",
        "..........",
        "..........",
        "..........",
        "..........",
        "..........",
        "..........",
        "..........",
        "...####...",
        "...####...",
        "...####...",
    ),
}
# fmt: on

GRID_WIDTH = 10
GRID_HEIGHT = 12

BUILTIN_STYLES = ("regular", "bold", "heavy", "oblique", "backslant", "condensed", "wide")


def glyph_labels() -> tuple[str, ...]:
    return tuple(_GLYPHS)


def base_grid(label: str) -> np.ndarray:
    """Boolean ink grid (GRID_HEIGHT x GRID_WIDTH) for one glyph."""
    rows = _GLYPHS.get(label)
    if rows is None:
        raise KeyError(label)
    grid = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
    assert grid.shape == (GRID_HEIGHT, GRID_WIDTH), label
    return grid


def _shear(grid: np.ndarray, slant: int) -> np.ndarray:
    """Stair-step shear around the vertical center; positive slants right.

    Rows where the shift steps are painted at both offsets so diagonal
    strokes stay connected across the step.
    """
    h, w = grid.shape
    center = (h - 1) / 2.0
    shifts = [round((center - r) / center * slant) for r in range(h)]
    lo, hi = min(shifts), max(shifts)
    out = np.zeros((h, w + hi - lo), dtype=bool)
    for r, s in enumerate(shifts):
        out[r, s - lo : s - lo + w] |= grid[r]
        if r > 0 and shifts[r - 1] != s and grid[r - 1].any():
            p = shifts[r - 1]
            out[r, p - lo : p - lo + w] |= grid[r]
    return out


def _rescale_width(grid: np.ndarray, new_w: int, keep: float) -> np.ndarray:
    """Horizontally resample the grid, thresholding to keep thin strokes."""
    img = GrayImage(1.0 - grid.astype(np.float64))
    resized = resize_bilinear(img, new_w, grid.shape[0])
    return (1.0 - resized.array) > keep


def styled_grid(label: str, style: str) -> np.ndarray:
    grid = base_grid(label)
    if style == "regular":
        return grid
    if style == "bold":
        out = grid.copy()
        out[:, 1:] |= grid[:, :-1]
        return out
    if style == "heavy":
        out = grid.copy()
        out[:, 1:] |= grid[:, :-1]
        out[1:, :] |= grid[:-1, :]
        return out
    if style == "oblique":
        return _shear(grid, 1)
    if style == "backslant":
        return _shear(grid, -1)
    if style == "condensed":
        return _rescale_width(grid, 7, keep=0.34)
    if style == "wide":
        return _rescale_width(grid, 14, keep=0.4)
    raise KeyError(f"unknown builtin style {style!r}")
