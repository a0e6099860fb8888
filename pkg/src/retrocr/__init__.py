"""retrocr: retrieval-based OCR at desk scale.

Text lines are decoded by localizing glyph boxes, embedding each crop with a
small contrastively trained CNN, and retrieving the nearest exemplar from an
offline index of clean font renders. Reading order and spaces come from the
box geometry alone; no language model is involved.
"""

from .core import (
    BBox,
    BoundsError,
    DegenerateBatch,
    EmptyCatalog,
    FormatError,
    GlyphCatalog,
    GlyphMissing,
    GrayImage,
    IncompatibleModel,
    LabeledCrop,
    MissingClass,
    NonFiniteGradient,
    RetrocrError,
    ShapeError,
    TextDirection,
    UndefinedMetric,
    Unsupported,
    crop,
    iou,
    read_png,
    write_png,
)
from .decode import DecodeConfig, LineResult, ModelBundle, recognize_line, recognize_line_words
from .encoder import EncoderParams, forward, init, load_weights, save_weights
from .contrastive import TrainerConfig, supcon_loss, train
from .evaluation import EvalReport, cer, eval_corpus
from .index import ExemplarIndex, build_index, load_index, save_index
from .synth import AugmentConfig, LineSpec, augment, compose_line, make_crop_dataset

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "BBox",
    "BoundsError",
    "DecodeConfig",
    "DegenerateBatch",
    "EmptyCatalog",
    "EncoderParams",
    "EvalReport",
    "ExemplarIndex",
    "FormatError",
    "GlyphCatalog",
    "GlyphMissing",
    "GrayImage",
    "IncompatibleModel",
    "LabeledCrop",
    "LineResult",
    "LineSpec",
    "MissingClass",
    "ModelBundle",
    "NonFiniteGradient",
    "RetrocrError",
    "ShapeError",
    "TextDirection",
    "TrainerConfig",
    "UndefinedMetric",
    "Unsupported",
    "augment",
    "build_index",
    "cer",
    "compose_line",
    "crop",
    "eval_corpus",
    "forward",
    "init",
    "iou",
    "load_index",
    "load_weights",
    "make_crop_dataset",
    "read_png",
    "recognize_line",
    "recognize_line_words",
    "save_index",
    "save_weights",
    "supcon_loss",
    "train",
    "write_png",
]
