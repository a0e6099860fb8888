"""Synthetic training data: glyph crops, augmentation, and text-line images.

Everything here is a pure function of its seed, so datasets rebuild
bit-identically and rendering can be parallelized per crop or line.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import (
    BBox,
    GlyphCatalog,
    GlyphMissing,
    GrayImage,
    LabeledCrop,
    TextDirection,
    crop,
    ink_bbox,
    normalize_crop,
    read_png,
    write_png,
)
from .fonts import FontSource

# Gap between adjacent glyphs, as a fraction of the glyph cell size.
CHAR_GAP_FRAC = 0.15


class GlyphCoverageWarning(UserWarning):
    """A font could not render some catalog labels; those pairs were skipped."""


@dataclass(frozen=True)
class AugmentConfig:
    """Distortion recipe applied to rendered crops.

    All draws happen in a fixed order from a per-crop generator, so a crop is
    a deterministic function of (image, config, seed).
    """

    translate_frac: float = 0.15
    scale_range: tuple[float, float] = (0.8, 1.2)
    jitter_strength: float = 0.2
    invert_prob: float = 0.1
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)
    background_level_range: tuple[float, float] = (0.7, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.translate_frac < 1.0:
            raise ValueError("translate_frac must lie in [0, 1)")
        if not 0.0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError("scale_range must be positive and ordered")
        if self.jitter_strength < 0.0:
            raise ValueError("jitter_strength must be >= 0")
        if not 0.0 <= self.invert_prob <= 1.0:
            raise ValueError("invert_prob must be a probability")
        if not 0.0 <= self.blur_sigma_range[0] <= self.blur_sigma_range[1]:
            raise ValueError("blur_sigma_range must be ordered and >= 0")
        lo, hi = self.background_level_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("background_level_range must lie in [0, 1] and be ordered")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        """All ranges degenerate: augment() becomes the identity map."""
        return cls(
            translate_frac=0.0,
            scale_range=(1.0, 1.0),
            jitter_strength=0.0,
            invert_prob=0.0,
            blur_sigma_range=(0.0, 0.0),
            background_level_range=(1.0, 1.0),
        )


def augment(image: GrayImage, cfg: AugmentConfig, seed: int) -> GrayImage:
    """Apply the distortion recipe; output has the input's dimensions."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    # Fixed draw order keeps crops reproducible even when a step is disabled.
    bg = rng.uniform(*cfg.background_level_range)
    scale = rng.uniform(*cfg.scale_range)
    h, w = image.array.shape
    tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * w
    ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * h
    contrast = 1.0 + rng.uniform(-cfg.jitter_strength, cfg.jitter_strength)
    brightness = rng.uniform(-cfg.jitter_strength, cfg.jitter_strength)
    invert = rng.uniform() < cfg.invert_prob
    sigma = rng.uniform(*cfg.blur_sigma_range)

    arr = image.array * bg
    if scale != 1.0 or tx != 0.0 or ty != 0.0:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        matrix = np.array([[1.0 / scale, 0.0], [0.0, 1.0 / scale]])
        offset = np.array([cy - (cy + ty) / scale, cx - (cx + tx) / scale])
        arr = ndimage.affine_transform(
            arr, matrix, offset=offset, order=1, mode="constant", cval=bg
        )
    if cfg.jitter_strength > 0.0:
        arr = (arr - 0.5) * contrast + 0.5 + brightness
    if invert:
        arr = 1.0 - arr
    if sigma > 1e-9:
        arr = ndimage.gaussian_filter(arr, sigma=sigma, mode="nearest")
    return GrayImage(np.clip(arr, 0.0, 1.0))


def render_label(font: FontSource, label: str, size: int) -> GrayImage:
    """Render a catalog label: a glyph cell, or a composed cell for words.

    Multi-character labels are laid out with the standard inter-glyph gap,
    cropped to their ink, and centered in a square cell, mirroring how word
    crops come out of a decoded line.
    """
    if len(label) == 1:
        return font.render(label, size)
    if any(ch.isspace() for ch in label):
        raise GlyphMissing(f"label {label!r} contains whitespace")
    image, _, _, _ = compose_line(
        LineSpec(text=label, font_id=font.font_id, glyph_size=size), {font.font_id: font}, 0
    )
    box = ink_bbox(image)
    if box is None:
        raise GlyphMissing(f"{font.font_id} produced no ink for {label!r}")
    return normalize_crop(crop(image, box), out_size=size)


@dataclass(frozen=True)
class LineSpec:
    """Recipe for one synthetic text line."""

    text: str
    font_id: str
    direction: TextDirection = TextDirection.HORIZONTAL_LTR
    glyph_size: int = 32
    spacing_jitter: float = 0.0
    word_gap: float = 0.75

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("line text must contain at least one non-space character")
        if self.glyph_size < 8:
            raise ValueError("glyph_size must be >= 8")
        if not 0.0 <= self.spacing_jitter < 1.0:
            raise ValueError("spacing_jitter must lie in [0, 1)")
        if self.word_gap <= 0.0:
            raise ValueError("word_gap must be positive")


def compose_line(
    spec: LineSpec, fonts: Mapping[str, FontSource], rng_seed: int
) -> tuple[GrayImage, list[BBox], list[BBox], str]:
    """Lay glyphs along the reading axis on a white canvas.

    Returns (image, char_boxes, word_boxes, transcript). Char boxes are
    ink-tight, one per non-space character in reading order; word boxes
    partition them at whitespace.
    """
    if not isinstance(fonts, Mapping) or spec.font_id not in fonts:
        raise KeyError(f"font {spec.font_id!r} not supplied")
    font = fonts[spec.font_id]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    size = spec.glyph_size
    margin = max(2, size // 8)
    gap_px = max(1, round(CHAR_GAP_FRAC * size))
    horizontal = spec.direction.horizontal

    # Generous canvas along the axis, with lead room for the first glyph's
    # in-cell offset; cropped to content afterwards.
    lead = size + margin
    span = lead + len(spec.text) * (size + 2 * round(spec.word_gap * size) + gap_px) + lead
    thick = size + 2 * margin
    canvas = np.ones((thick, span) if horizontal else (span, thick), dtype=np.float64)

    char_boxes: list[BBox] = []
    word_groups: list[list[int]] = [[]]
    cursor = lead
    pending_gap = 0
    for ch in spec.text:
        jitter = 1.0 + rng.uniform(-spec.spacing_jitter, spec.spacing_jitter)
        if ch.isspace():
            pending_gap += round(spec.word_gap * size * jitter)
            if word_groups[-1]:
                word_groups.append([])
            continue
        cell = font.render(ch, size)
        tight = ink_bbox(cell)
        if tight is None:
            raise GlyphMissing(f"{font.font_id} rendered no ink for {ch!r}")
        cursor += pending_gap
        pending_gap = 0
        if horizontal:
            x0, y0 = cursor - tight.x0, margin
        else:
            x0, y0 = margin, cursor - tight.y0
        region = canvas[y0 : y0 + size, x0 : x0 + size]
        np.minimum(region, cell.array, out=region)
        box = tight.translated(x0, y0)
        char_boxes.append(box)
        word_groups[-1].append(len(char_boxes) - 1)
        extent = tight.width if horizontal else tight.height
        cursor += extent + max(1, round(gap_px * jitter))

    if not char_boxes:
        raise GlyphMissing("line rendered no glyphs")
    if horizontal:
        start = min(b.x0 for b in char_boxes) - margin
        end = max(b.x1 for b in char_boxes) + margin
        image = GrayImage(canvas[:, start:end])
        char_boxes = [b.translated(-start, 0) for b in char_boxes]
    else:
        start = min(b.y0 for b in char_boxes) - margin
        end = max(b.y1 for b in char_boxes) + margin
        image = GrayImage(canvas[start:end, :])
        char_boxes = [b.translated(0, -start) for b in char_boxes]
    word_boxes = []
    for group in word_groups:
        if not group:
            continue
        union = char_boxes[group[0]]
        for idx in group[1:]:
            union = union.union(char_boxes[idx])
        word_boxes.append(union)
    return image, char_boxes, word_boxes, spec.text


@dataclass(frozen=True)
class LineSample:
    """A composed line with its ground truth."""

    image: GrayImage
    transcript: str
    char_boxes: tuple[BBox, ...]
    word_boxes: tuple[BBox, ...]
    char_class_ids: tuple[int, ...] = ()


def make_line_corpus(
    catalog: GlyphCatalog,
    specs: Sequence[LineSpec],
    fonts: Mapping[str, FontSource],
    seed: int,
) -> list[LineSample]:
    """Compose a batch of line specs with per-line derived seeds."""
    samples = []
    for i, spec in enumerate(specs):
        line_seed = derive_seed(seed, "line", i)
        image, char_boxes, word_boxes, transcript = compose_line(spec, fonts, line_seed)
        ids = tuple(catalog.class_id(ch) for ch in transcript if not ch.isspace())
        samples.append(
            LineSample(image, transcript, tuple(char_boxes), tuple(word_boxes), ids)
        )
    return samples


def derive_seed(root: int, *key) -> int:
    """Stable sub-seed derivation for nested deterministic pipelines."""
    parts = [int(root) & 0xFFFFFFFF]
    for k in key:
        if isinstance(k, str):
            parts.extend(k.encode("utf-8"))
        else:
            parts.append(int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def make_crop_dataset(
    catalog: GlyphCatalog,
    fonts: Sequence[FontSource],
    variants_per_class: int,
    cfg: AugmentConfig,
    seed: int,
) -> list[LabeledCrop]:
    """Render the labeled crop set used to train the recognizer.

    For every (class, font) pair this yields `variants_per_class` crops: the
    first is the clean render, the rest are augmented variants. Pairs a font
    cannot render are skipped with a GlyphCoverageWarning.
    """
    if variants_per_class < 1:
        raise ValueError("variants_per_class must be >= 1")
    crops: list[LabeledCrop] = []
    missing: list[str] = []
    for class_id, label in enumerate(catalog):
        for font_idx, font in enumerate(fonts):
            try:
                clean = font.render(label, 32)
            except GlyphMissing:
                missing.append(f"{font.font_id}:{label!r}")
                continue
            crops.append(LabeledCrop(clean, class_id, "font-render", aug_seed=None))
            for variant in range(1, variants_per_class):
                crop_seed = derive_seed(seed, "crop", class_id, font_idx, variant)
                crops.append(
                    LabeledCrop(
                        augment(clean, cfg, crop_seed),
                        class_id,
                        "font-render",
                        aug_seed=crop_seed,
                    )
                )
    if missing:
        warnings.warn(
            f"skipped unrenderable (font, class) pairs: {', '.join(missing)}",
            GlyphCoverageWarning,
            stacklevel=2,
        )
    return crops


def save_crop_dataset(crops: Sequence[LabeledCrop], directory, catalog: GlyphCatalog) -> None:
    """PNG crops plus a JSON manifest of (file, class_id, source, seed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, item in enumerate(crops):
        name = f"crop_{i:06d}.png"
        write_png(item.image, directory / name)
        entries.append(
            {"file": name, "class_id": item.class_id, "source": item.source, "seed": item.aug_seed}
        )
    manifest = {"catalog": list(catalog.labels), "crops": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_crop_dataset(directory) -> tuple[list[LabeledCrop], GlyphCatalog]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    catalog = GlyphCatalog(manifest["catalog"])
    crops = [
        LabeledCrop(
            read_png(directory / entry["file"]),
            entry["class_id"],
            entry["source"],
            aug_seed=entry.get("seed"),
        )
        for entry in manifest["crops"]
    ]
    return crops, catalog


def save_line_dataset(samples: Sequence[LineSample], directory, catalog: GlyphCatalog) -> None:
    """PNG lines plus COCO-style box annotations and transcripts."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    n_classes = len(catalog)
    for img_id, sample in enumerate(samples, start=1):
        name = f"line_{img_id:06d}.png"
        write_png(sample.image, directory / name)
        images.append(
            {
                "id": img_id,
                "file_name": name,
                "width": sample.image.width,
                "height": sample.image.height,
                "text": sample.transcript,
            }
        )
        for box, class_id in zip(sample.char_boxes, sample.char_class_ids):
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": img_id,
                    "category_id": class_id,
                    "bbox": [box.x0, box.y0, box.width, box.height],
                    "area": box.area,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
        for box in sample.word_boxes:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": img_id,
                    "category_id": n_classes,  # reserved "word" category
                    "bbox": [box.x0, box.y0, box.width, box.height],
                    "area": box.area,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    categories = [{"id": i, "name": label} for i, label in enumerate(catalog)]
    categories.append({"id": n_classes, "name": "word"})
    coco = {"images": images, "annotations": annotations, "categories": categories}
    (directory / "annotations.json").write_text(json.dumps(coco, indent=1), encoding="utf-8")


def load_line_dataset(directory) -> tuple[list[LineSample], GlyphCatalog]:
    directory = Path(directory)
    coco = json.loads((directory / "annotations.json").read_text(encoding="utf-8"))
    labels = [c["name"] for c in coco["categories"] if c["name"] != "word"]
    catalog = GlyphCatalog(labels)
    word_cat = len(labels)
    by_image: dict[int, dict] = {}
    for entry in coco["images"]:
        by_image[entry["id"]] = {"meta": entry, "chars": [], "words": []}
    for ann in coco["annotations"]:
        x, y, w, h = ann["bbox"]
        box = BBox(x, y, x + w, y + h)
        bucket = by_image[ann["image_id"]]
        if ann["category_id"] == word_cat:
            bucket["words"].append(box)
        else:
            bucket["chars"].append((box, ann["category_id"]))
    samples = []
    for img_id in sorted(by_image):
        bucket = by_image[img_id]
        image = read_png(directory / bucket["meta"]["file_name"])
        chars = bucket["chars"]
        samples.append(
            LineSample(
                image,
                bucket["meta"]["text"],
                tuple(b for b, _ in chars),
                tuple(bucket["words"]),
                tuple(cid for _, cid in chars),
            )
        )
    return samples, catalog
