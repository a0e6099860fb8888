"""Offline exemplar embedding index with exact inner-product search.

The index is immutable once built: rebuilding is how new classes are added,
which keeps concurrent decoding trivially safe. Search is an exhaustive
scan — at desk scale (thousands of entries) nothing faster is needed, and
exactness makes the oracle property testable.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    EmptyCatalog,
    FormatError,
    GlyphCatalog,
    GlyphMissing,
    GrayImage,
    IncompatibleModel,
    crop,
    ink_bbox,
    normalize_crop,
)
from .encoder import EncoderParams, embed_crops
from .fonts import FontSource
from .synth import GlyphCoverageWarning, render_label

_HEADER_STRUCT = struct.Struct("<I")
FORMAT_VERSION = 1


class ExemplarIndex:
    """Unit-norm exemplar embeddings with labels, searched by inner product."""

    def __init__(
        self,
        embeddings: np.ndarray,
        class_ids: Sequence[int],
        catalog: GlyphCatalog,
        encoder_fingerprint: str,
    ) -> None:
        emb = np.ascontiguousarray(embeddings, dtype=np.float32)
        ids = np.ascontiguousarray(class_ids, dtype=np.int32)
        if emb.ndim != 2 or emb.shape[0] != ids.shape[0]:
            raise ValueError("embeddings and class_ids disagree")
        if emb.shape[0] == 0:
            raise EmptyCatalog("index needs at least one entry")
        norms = np.linalg.norm(emb.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("index embeddings must be unit-norm within 1e-5")
        if ids.min() < 0 or ids.max() >= len(catalog):
            raise ValueError("class ids outside the catalog")
        emb.setflags(write=False)
        ids.setflags(write=False)
        self._embeddings = emb
        self._class_ids = ids
        self.catalog = catalog
        self.encoder_fingerprint = encoder_fingerprint

    @property
    def dim(self) -> int:
        return self._embeddings.shape[1]

    @property
    def embeddings(self) -> np.ndarray:
        return self._embeddings

    @property
    def class_ids(self) -> np.ndarray:
        return self._class_ids

    def __len__(self) -> int:
        return self._embeddings.shape[0]

    def query(self, embedding, k: int = 1) -> list[tuple[int, float]]:
        """Exact top-k by inner product, descending; ties break on ascending
        class id, then insertion order. k beyond the index size returns all.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        e = np.asarray(embedding, dtype=np.float64).reshape(-1)
        if e.shape[0] != self.dim:
            raise ValueError(f"query dim {e.shape[0]} != index dim {self.dim}")
        sims = self._embeddings.astype(np.float64) @ e
        order = np.lexsort((np.arange(len(sims)), self._class_ids, -sims))
        top = order[: min(k, len(sims))]
        return [(int(self._class_ids[i]), float(sims[i])) for i in top]

    def query_batch(self, embeddings: np.ndarray, k: int = 1) -> list[list[tuple[int, float]]]:
        return [self.query(e, k) for e in np.asarray(embeddings, dtype=np.float64)]


def build_index(
    params: EncoderParams, exemplar_font: FontSource, catalog: GlyphCatalog
) -> ExemplarIndex:
    """Embed one clean render per catalog class.

    Labels the exemplar font cannot render are skipped with a warning naming
    them; renders go through the same crop normalization as decoded glyphs.
    """
    if len(catalog) == 0:
        raise EmptyCatalog("cannot index an empty catalog")
    images: list[GrayImage] = []
    ids: list[int] = []
    missing: list[str] = []
    for class_id, label in enumerate(catalog):
        try:
            cell = render_label(exemplar_font, label, 32)
        except GlyphMissing:
            missing.append(repr(label))
            continue
        box = ink_bbox(cell)
        if box is None:
            missing.append(repr(label))
            continue
        images.append(normalize_crop(crop(cell, box), out_size=params.arch.input_hw[0]))
        ids.append(class_id)
    if missing:
        warnings.warn(
            f"exemplar font {exemplar_font.font_id} cannot render: {', '.join(missing)}",
            GlyphCoverageWarning,
            stacklevel=2,
        )
    if not ids:
        raise EmptyCatalog("exemplar font covers no catalog label")
    embeddings = embed_crops(params, images)
    return ExemplarIndex(embeddings, ids, catalog, params.weights_digest)


def save_index(index: ExemplarIndex, path) -> None:
    """JSON header + float32 embedding block + int32 class-id block."""
    header = {
        "format_version": FORMAT_VERSION,
        "dim": index.dim,
        "count": len(index),
        "catalog_digest": index.catalog.digest,
        "catalog_labels": list(index.catalog.labels),
        "encoder_fingerprint": index.encoder_fingerprint,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(_HEADER_STRUCT.pack(len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(index.class_ids, dtype="<i4").tobytes())


def load_index(path, expected_params: EncoderParams | None = None) -> ExemplarIndex:
    """Read an index file; optionally pin it to the encoder that will query it."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER_STRUCT.size:
        raise FormatError("index file too short")
    (header_len,) = _HEADER_STRUCT.unpack_from(data)
    if len(data) < _HEADER_STRUCT.size + header_len:
        raise FormatError("truncated index header")
    try:
        header = json.loads(data[_HEADER_STRUCT.size : _HEADER_STRUCT.size + header_len])
        version = header["format_version"]
        dim = int(header["dim"])
        count = int(header["count"])
        labels = list(header["catalog_labels"])
        digest = header["catalog_digest"]
        fingerprint = header["encoder_fingerprint"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed index header: {exc}") from exc
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported index format version {version}")
    catalog = GlyphCatalog(labels)
    if catalog.digest != digest:
        raise FormatError("catalog digest does not match stored labels")
    offset = _HEADER_STRUCT.size + header_len
    emb_bytes = dim * count * 4
    id_bytes = count * 4
    if len(data) != offset + emb_bytes + id_bytes:
        raise FormatError("index data block has the wrong size")
    embeddings = np.frombuffer(data, dtype="<f4", count=dim * count, offset=offset).reshape(
        count, dim
    )
    ids = np.frombuffer(data, dtype="<i4", count=count, offset=offset + emb_bytes)
    index = ExemplarIndex(embeddings, ids, catalog, fingerprint)
    if expected_params is not None and expected_params.weights_digest != fingerprint:
        raise IncompatibleModel("index was built with a different encoder")
    return index


def check_compatible(index: ExemplarIndex, params: EncoderParams) -> None:
    if index.encoder_fingerprint != params.weights_digest:
        raise IncompatibleModel(
            "index fingerprint does not match the encoder producing queries"
        )
