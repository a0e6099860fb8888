"""Classical character/word localization for single text lines.

Connected components of the Otsu ink mask, with a merge rule that reattaches
detached glyph fragments (the dot of an i, diacritics): two components merge
when their spans along the reading axis overlap by more than half of the
smaller span and their gap across the reading axis is under a quarter of the
median component extent. Any localizer producing the same output shape can
replace this one in the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import BBox, GrayImage, TextDirection, Unsupported

MIN_COMPONENT_AREA = 4
MERGE_OVERLAP_FRAC = 0.5
MERGE_GAP_FRAC = 0.25
WORD_GAP_FACTOR = 0.5

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class LocalizerOutput:
    """Boxes for one line; word_boxes is empty in character-only mode."""

    char_boxes: tuple[BBox, ...]
    word_boxes: tuple[BBox, ...]
    direction: TextDirection


def binarize(image: GrayImage) -> np.ndarray:
    """Otsu-thresholded ink mask (True = ink). Constant images yield no ink."""
    arr = image.array
    if arr.max() - arr.min() < 1e-12:
        return np.zeros(arr.shape, dtype=bool)
    hist, edges = np.histogram(arr, bins=256, range=(0.0, 1.0))
    total = arr.size
    p = hist.astype(np.float64) / total
    omega = np.cumsum(p)
    mu = np.cumsum(p * np.arange(256))
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * omega - mu) ** 2 / (omega * (1.0 - omega))
    between[~np.isfinite(between)] = -1.0
    k = int(between.argmax())
    threshold = edges[k + 1]
    return arr < threshold


@dataclass(frozen=True)
class _Component:
    box: BBox
    area: int

    def merged(self, other: "_Component") -> "_Component":
        return _Component(self.box.union(other.box), self.area + other.area)


def _raw_components(mask: np.ndarray) -> list[_Component]:
    labeled, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    comps = []
    for sl in ndimage.find_objects(labeled):
        if sl is None:
            continue
        area = int(mask[sl].sum())
        comps.append(
            _Component(BBox(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop), area)
        )
    return comps


def _should_merge(a: _Component, b: _Component, horizontal: bool, median_extent: float) -> bool:
    """Do these components look like vertically stacked pieces of one glyph?

    Fragments (an i's dot over its stem, diacritics over a base) stack along
    the y axis whatever the reading direction, so the test is always: strong
    x-overlap plus a small y gap. In vertical lines adjacent characters also
    overlap in x, so there the pieces must additionally differ clearly in
    height (a dot against a body); heavy spacing jitter can still confuse
    vertical dot attribution, a documented limitation.
    """
    ax0, ax1, bx0, bx1 = a.box.x0, a.box.x1, b.box.x0, b.box.x1
    overlap = min(ax1, bx1) - max(ax0, bx0)
    smaller = min(ax1 - ax0, bx1 - bx0)
    if smaller <= 0 or overlap <= MERGE_OVERLAP_FRAC * smaller:
        return False
    gap = max(b.box.y0 - a.box.y1, a.box.y0 - b.box.y1, 0)
    if gap >= MERGE_GAP_FRAC * median_extent:
        return False
    if not horizontal:
        heights = sorted((a.box.height, b.box.height))
        if heights[0] > 0.5 * heights[1]:
            return False
    return True


def _merge_components(comps: list[_Component], horizontal: bool) -> list[_Component]:
    if not comps:
        return []
    if horizontal:
        extents = sorted(c.box.width for c in comps)
    else:
        extents = sorted(c.box.height for c in comps)
    median_extent = float(extents[len(extents) // 2])
    items = list(comps)
    changed = True
    while changed:
        changed = False
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                if _should_merge(items[i], items[j], horizontal, median_extent):
                    merged = items[i].merged(items[j])
                    items[i] = merged
                    del items[j]
                    changed = True
                    break
            if changed:
                break
    return items


def localize_chars(image: GrayImage, direction: TextDirection) -> list[BBox]:
    """Character boxes for one line image; unordered, blank lines yield []."""
    mask = binarize(image)
    comps = _raw_components(mask)
    comps = _merge_components(comps, direction.horizontal)
    comps = [c for c in comps if c.area >= MIN_COMPONENT_AREA]
    return [c.box for c in comps]


def localize_words(image: GrayImage) -> list[BBox]:
    """Word boxes for a horizontal line: character boxes clustered by gap.

    A new word starts when the gap along the reading axis exceeds
    WORD_GAP_FACTOR times the median character width.
    """
    return group_words(localize_chars(image, TextDirection.HORIZONTAL_LTR))


def group_words(char_boxes: list[BBox], direction: TextDirection = TextDirection.HORIZONTAL_LTR) -> list[BBox]:
    """Cluster character boxes into word boxes by the along-axis gap rule."""
    if not direction.horizontal:
        raise Unsupported("word grouping handles horizontal lines only")
    if not char_boxes:
        return []
    boxes = sorted(char_boxes, key=lambda b: (b.center[0], b.center[1]))
    widths = sorted(b.width for b in boxes)
    median_width = widths[len(widths) // 2]
    threshold = WORD_GAP_FACTOR * median_width
    words: list[BBox] = []
    current = boxes[0]
    prev = boxes[0]
    for box in boxes[1:]:
        if box.x0 - prev.x1 > threshold:
            words.append(current)
            current = box
        else:
            current = current.union(box)
        prev = box
    words.append(current)
    return words


def localize(image: GrayImage, direction: TextDirection, words: bool = False) -> LocalizerOutput:
    """Full localizer interface: char boxes, optional word boxes."""
    chars = localize_chars(image, direction)
    word_boxes: tuple[BBox, ...] = ()
    if words:
        if not direction.horizontal:
            raise Unsupported("word mode handles horizontal lines only")
        word_boxes = tuple(group_words(chars, direction))
    return LocalizerOutput(tuple(chars), word_boxes, direction)
