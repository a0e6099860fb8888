"""Line decoding: localize, embed, retrieve, then order and space.

Character mode assigns every localized glyph the label of its nearest
exemplar. Word mode embeds whole word crops against a word index and falls
back to character decoding inside any word whose best similarity drops
below the configured threshold, which handles out-of-dictionary tokens.
"""

from __future__ import annotations

import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import BBox, GrayImage, TextDirection, crop, normalize_crop
from .encoder import EncoderParams, forward
from .index import ExemplarIndex, check_compatible
from .localize import group_words, localize_chars

EMBED_CHUNK = 128


@dataclass(frozen=True)
class DecodeConfig:
    """Decoding knobs; the word fallback threshold is a cosine similarity."""

    mode: str = "char"
    direction: TextDirection = TextDirection.HORIZONTAL_LTR
    word_fallback_threshold: float = 0.82
    space_gap_factor: float = 0.5
    k: int = 5

    def __post_init__(self):
        if self.mode not in ("char", "word"):
            raise ValueError(f"mode must be 'char' or 'word', got {self.mode!r}")
        if not -1.0 < self.word_fallback_threshold <= 1.0:
            raise ValueError("word_fallback_threshold must lie in (-1, 1]")
        if self.space_gap_factor <= 0:
            raise ValueError("space_gap_factor must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class GlyphResult:
    """One recognized unit: its box, label, and retrieval diagnostics."""

    box: BBox
    label: str
    similarity: float
    alternatives: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class LineResult:
    """Decoded text plus per-unit diagnostics for one line image."""

    text: str
    glyphs: tuple[GlyphResult, ...]
    fallback_events: int = 0


def order_boxes(boxes: Sequence[BBox], direction: TextDirection) -> list[int]:
    """Reading-order permutation: ascending center along the text axis,
    ties broken by the other axis, then input position."""
    if direction.horizontal:
        key = lambda i: (boxes[i].center[0], boxes[i].center[1], i)
    else:
        key = lambda i: (boxes[i].center[1], boxes[i].center[0], i)
    return sorted(range(len(boxes)), key=key)


def infer_spaces(ordered_boxes: Sequence[BBox], cfg: DecodeConfig) -> set[int]:
    """Positions j where a space follows glyph j.

    A space is inserted when the along-axis gap to the next box exceeds
    space_gap_factor times the median along-axis extent. Vertical lines
    never receive spaces.
    """
    if len(ordered_boxes) < 2 or not cfg.direction.horizontal:
        return set()
    extents = [b.width for b in ordered_boxes]
    threshold = cfg.space_gap_factor * statistics.median(extents)
    gaps = set()
    for j in range(len(ordered_boxes) - 1):
        if ordered_boxes[j + 1].x0 - ordered_boxes[j].x1 > threshold:
            gaps.add(j)
    return gaps


def _embed_boxes(
    image: GrayImage,
    boxes: Sequence[BBox],
    params: EncoderParams,
    workers: int,
) -> np.ndarray:
    """Crop, normalize, and embed each box; parallel over chunks of crops."""
    size = params.arch.input_hw[0]
    crops = [normalize_crop(crop(image, b), out_size=size) for b in boxes]
    chunks = [crops[i : i + EMBED_CHUNK] for i in range(0, len(crops), EMBED_CHUNK)]
    if workers <= 1 or len(chunks) <= 1:
        parts = [forward(params, chunk)[0] for chunk in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda chunk: forward(params, chunk)[0], chunks))
    return np.concatenate(parts, axis=0)


def _retrieve(
    index: ExemplarIndex, embeddings: np.ndarray, k: int
) -> list[tuple[str, float, tuple[tuple[str, float], ...]]]:
    out = []
    for e in embeddings:
        hits = index.query(e, k=k)
        label = index.catalog.label(hits[0][0])
        alts = tuple((index.catalog.label(cid), sim) for cid, sim in hits)
        out.append((label, hits[0][1], alts))
    return out


def recognize_line(
    image: GrayImage,
    params: EncoderParams,
    char_index: ExemplarIndex,
    cfg: DecodeConfig,
    workers: int = 1,
    char_boxes: Optional[Sequence[BBox]] = None,
    localizer: Optional[Callable[[GrayImage, TextDirection], Sequence[BBox]]] = None,
) -> LineResult:
    """Character-mode decoding of one line image.

    `char_boxes` (or a custom `localizer`) replaces the built-in classical
    localizer, which lets ground-truth boxes or a learned detector drive the
    same retrieval pipeline.
    """
    check_compatible(char_index, params)
    if char_boxes is None:
        locate = localizer if localizer is not None else localize_chars
        char_boxes = list(locate(image, cfg.direction))
    if not char_boxes:
        return LineResult("", (), 0)
    perm = order_boxes(char_boxes, cfg.direction)
    ordered = [char_boxes[i] for i in perm]
    embeddings = _embed_boxes(image, ordered, params, workers)
    hits = _retrieve(char_index, embeddings, cfg.k)
    spaces = infer_spaces(ordered, cfg)
    glyphs = []
    pieces = []
    for j, (box, (label, sim, alts)) in enumerate(zip(ordered, hits)):
        glyphs.append(GlyphResult(box, label, sim, alts))
        pieces.append(label)
        if j in spaces:
            pieces.append(" ")
    return LineResult("".join(pieces), tuple(glyphs), 0)


def recognize_line_words(
    image: GrayImage,
    params: EncoderParams,
    word_index: ExemplarIndex,
    char_index: ExemplarIndex,
    cfg: DecodeConfig,
    workers: int = 1,
    word_boxes: Optional[Sequence[BBox]] = None,
) -> LineResult:
    """Word-mode decoding with per-word character fallback.

    Every word crop whose best exemplar similarity falls below the threshold
    is re-decoded character by character inside its box; each such word
    counts one fallback event. Words are joined by single spaces.
    """
    check_compatible(word_index, params)
    check_compatible(char_index, params)
    if word_boxes is None:
        chars = localize_chars(image, cfg.direction)
        word_boxes = group_words(chars, cfg.direction)
    if not word_boxes:
        return LineResult("", (), 0)
    perm = order_boxes(word_boxes, cfg.direction)
    ordered = [word_boxes[i] for i in perm]
    embeddings = _embed_boxes(image, ordered, params, workers)
    hits = _retrieve(word_index, embeddings, cfg.k)
    words: list[str] = []
    glyphs: list[GlyphResult] = []
    fallbacks = 0
    char_cfg = DecodeConfig(
        mode="char",
        direction=cfg.direction,
        word_fallback_threshold=cfg.word_fallback_threshold,
        space_gap_factor=cfg.space_gap_factor,
        k=cfg.k,
    )
    for box, (label, sim, alts) in zip(ordered, hits):
        if sim >= cfg.word_fallback_threshold:
            words.append(label)
            glyphs.append(GlyphResult(box, label, sim, alts))
            continue
        fallbacks += 1
        sub = recognize_line(crop(image, box), params, char_index, char_cfg, workers=workers)
        words.append(sub.text.replace(" ", ""))
        glyphs.extend(
            GlyphResult(g.box.translated(box.x0, box.y0), g.label, g.similarity, g.alternatives)
            for g in sub.glyphs
        )
    return LineResult(" ".join(words), tuple(glyphs), fallbacks)


@dataclass(frozen=True)
class ModelBundle:
    """Everything needed to decode lines: encoder, indexes, and config."""

    params: EncoderParams
    char_index: ExemplarIndex
    config: DecodeConfig = field(default_factory=DecodeConfig)
    word_index: Optional[ExemplarIndex] = None

    def decode_line(self, image: GrayImage, workers: int = 1) -> LineResult:
        if self.config.mode == "word":
            if self.word_index is None:
                raise ValueError("word mode needs a word index")
            return recognize_line_words(
                image, self.params, self.word_index, self.char_index, self.config, workers
            )
        return recognize_line(image, self.params, self.char_index, self.config, workers)


def generate_silver(
    params: EncoderParams,
    char_index: ExemplarIndex,
    line_images: Sequence[GrayImage],
    word_catalog,
    cap: int = 20,
    cfg: Optional[DecodeConfig] = None,
) -> list:
    """Harvest model-labeled word crops from unlabeled lines.

    Character-mode decoding runs over each line; word boxes whose decoded
    string is a word-catalog entry yield a silver crop, keeping at most
    `cap` crops per word label in deterministic first-come order.
    """
    from .core import LabeledCrop

    if cap < 1:
        raise ValueError("cap must be >= 1")
    cfg = cfg or DecodeConfig()
    counts: dict[int, int] = {}
    out: list[LabeledCrop] = []
    for image in line_images:
        boxes = localize_chars(image, cfg.direction)
        if not boxes:
            continue
        result = recognize_line(image, params, char_index, cfg, char_boxes=boxes)
        words = group_words([g.box for g in result.glyphs], cfg.direction)
        for wbox in words:
            inside = [g for g in result.glyphs if wbox.contains_point(*g.box.center)]
            decoded = "".join(g.label for g in inside)
            if decoded not in word_catalog:
                continue
            class_id = word_catalog.class_id(decoded)
            if counts.get(class_id, 0) >= cap:
                continue
            counts[class_id] = counts.get(class_id, 0) + 1
            out.append(LabeledCrop(crop(image, wbox), class_id, "silver"))
    return out
