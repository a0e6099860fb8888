"""Evaluation harnesses: CER, corpus scoring, throughput, sample-efficiency
curves, and the training-variant comparison suite.

CER is micro-aggregated over a corpus: total edit distance divided by total
ground-truth length, which matches per-string normalization applied
corpus-wide. Comparison is caseless after Unicode NFC normalization.
"""

from __future__ import annotations

import csv
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .contrastive import (
    TrainerConfig,
    classify_crops,
    train,
    train_classifier,
    train_single_stage,
)
from .core import GlyphCatalog, GrayImage,LabeledCrop, RetrocrError, UndefinedMetric, crop
from .decode import DecodeConfig, ModelBundle
from .encoder import EncoderParams
from .fonts import FontSource
from .index import build_index
from .localize import localize_chars
from .synth import LineSample, derive_seed


def _canon(s: str) -> str:
    return unicodedata.normalize("NFC", s).casefold()


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance (insert/delete/substitute)."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(predicted: str, truth: str) -> float:
    """Edit distance over ground-truth length; caseless, NFC-normalized.

    May exceed 1 when the prediction is much longer than the truth.
    """
    truth_c = _canon(truth)
    if not truth_c:
        raise UndefinedMetric("CER is undefined for an empty ground truth")
    return levenshtein(_canon(predicted), truth_c) / len(truth_c)


@dataclass(frozen=True)
class EvalReport:
    """Corpus-level scoring result."""

    per_line_cer: tuple[float, ...]
    aggregate_cer: float
    line_count: int
    wall_clock_s: float
    lines_per_sec: float
    failed_lines: tuple[int, ...] = ()

    def summary(self) -> str:
        return (
            f"lines={self.line_count} CER={self.aggregate_cer:.4f} "
            f"lines/s={self.lines_per_sec:.2f} failed={len(self.failed_lines)}"
        )


DecodeFn = Callable[[GrayImage], str]


def _as_decode_fn(model) -> DecodeFn:
    if isinstance(model, ModelBundle):
        return lambda image: model.decode_line(image, workers=1).text
    if callable(model):
        return model
    raise TypeError("model must be a ModelBundle or a callable image -> text")


def eval_corpus(
    model,
    test_set: Sequence[tuple[GrayImage, str]],
    workers: int = 1,
) -> EvalReport:
    """Decode every line and micro-aggregate CER.

    A line whose decode raises is flagged and scored as fully wrong (its
    whole ground truth counted as deletions) without aborting the run.
    `model` is a ModelBundle or any image -> text callable.
    """
    if not test_set:
        raise ValueError("test set must be non-empty")
    decode_fn = _as_decode_fn(model)

    def run_one(item):
        image, truth = item
        try:
            return decode_fn(image), None
        except RetrocrError as exc:
            return "", exc

    t0 = time.perf_counter()
    if workers <= 1:
        outputs = [run_one(item) for item in test_set]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(run_one, test_set))
    wall = time.perf_counter() - t0

    per_line = []
    failed = []
    total_edits = 0
    total_len = 0
    for i, ((_, truth), (text, err)) in enumerate(zip(test_set, outputs)):
        truth_c = _canon(truth)
        if not truth_c:
            raise UndefinedMetric(f"line {i}: empty ground truth")
        if err is not None:
            failed.append(i)
            edits = len(truth_c)
        else:
            edits = levenshtein(_canon(text), truth_c)
        per_line.append(edits / len(truth_c))
        total_edits += edits
        total_len += len(truth_c)
    return EvalReport(
        per_line_cer=tuple(per_line),
        aggregate_cer=total_edits / total_len,
        line_count=len(test_set),
        wall_clock_s=wall,
        lines_per_sec=len(test_set) / wall if wall > 0 else float("inf"),
        failed_lines=tuple(failed),
    )


@dataclass(frozen=True)
class ThroughputRow:
    workers: int
    lines_per_sec: float
    wall_clock_s: float


def bench_throughput(
    model: ModelBundle,
    lines: Sequence[GrayImage],
    worker_counts: Sequence[int] = (1, 2, 4),
) -> list[ThroughputRow]:
    """Wall-clock decoding throughput per worker count, decode only.

    Decoded text must be identical across worker counts; a mismatch means a
    nondeterministic decode path and raises immediately.
    """
    if len(lines) < 50:
        raise ValueError("need at least 50 lines for stable timing")
    reference: Optional[list[str]] = None
    rows = []
    for workers in worker_counts:
        decode = lambda image: model.decode_line(image, workers=1).text
        t0 = time.perf_counter()
        if workers <= 1:
            texts = [decode(img) for img in lines]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                texts = list(pool.map(decode, lines))
        wall = time.perf_counter() - t0
        if reference is None:
            reference = texts
        elif texts != reference:
            raise RuntimeError(f"decode output changed at worker count {workers}")
        rows.append(ThroughputRow(workers, len(lines) / wall, wall))
    return rows


def write_throughput_csv(rows: Sequence[ThroughputRow], path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["workers", "lines_per_sec", "wall_clock_s"])
        for row in rows:
            writer.writerow([row.workers, f"{row.lines_per_sec:.4f}", f"{row.wall_clock_s:.4f}"])


def harvest_target_crops(
    samples: Sequence[LineSample], source: str = "target-annotation"
) -> list[LabeledCrop]:
    """Cut labeled character crops out of annotated lines."""
    crops = []
    for sample in samples:
        for box, class_id in zip(sample.char_boxes, sample.char_class_ids):
            crops.append(LabeledCrop(crop(sample.image, box), class_id, source))
    return crops


@dataclass(frozen=True)
class CurvePoint:
    fraction: float
    cer: float
    train_lines: int
    test_lines: int


DEFAULT_FRACTIONS = (0.70, 0.50, 0.20, 0.05, 0.0)


def sample_efficiency(
    labeled_lines: Sequence[LineSample],
    fractions: Sequence[float],
    base_crops: Sequence[LabeledCrop],
    catalog: GlyphCatalog,
    exemplar_font: FontSource,
    trainer_cfg: TrainerConfig,
    decode_cfg: Optional[DecodeConfig] = None,
    seed: int = 0,
) -> list[CurvePoint]:
    """CER as a function of how much labeled target data joins training.

    For each fraction f the shuffled line set splits into f train and
    (1-f)/2 held-out test (mirroring a train/val/test protocol); crops
    harvested from the train lines join the synthetic base and a model is
    trained from the same seed. f = 0 is the render-only, zero-shot row.
    """
    decode_cfg = decode_cfg or DecodeConfig()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(derive_seed(seed, "curve"))))
    order = rng.permutation(len(labeled_lines))
    shuffled = [labeled_lines[i] for i in order]
    points = []
    for fraction in fractions:
        if not 0.0 <= fraction < 1.0:
            raise ValueError(f"fraction {fraction} outside [0, 1)")
        n_train = int(round(fraction * len(shuffled)))
        n_test = max(1, int(round((1.0 - fraction) / 2 * len(shuffled))))
        train_lines = shuffled[:n_train]
        test_lines = shuffled[len(shuffled) - n_test :]
        dataset = list(base_crops) + harvest_target_crops(train_lines)
        params, _ = train(dataset, catalog, trainer_cfg, seed=seed)
        bundle = ModelBundle(params, build_index(params, exemplar_font, catalog), decode_cfg)
        report = eval_corpus(bundle, [(s.image, s.transcript) for s in test_lines])
        points.append(CurvePoint(fraction, report.aggregate_cer, n_train, n_test))
    return points


def write_curve_csv(points: Sequence[CurvePoint], path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "cer", "train_lines", "test_lines"])
        for p in points:
            writer.writerow([f"{p.fraction:.2f}", f"{p.cer:.6f}", p.train_lines, p.test_lines])


@dataclass(frozen=True)
class AblationInputs:
    """Prepared pieces shared by all training variants."""

    synth_crops: tuple[LabeledCrop, ...]
    target_crops: tuple[LabeledCrop, ...]
    catalog: GlyphCatalog
    exemplar_font: FontSource
    eval_lines: tuple[LineSample, ...]
    trainer_cfg: TrainerConfig
    decode_cfg: DecodeConfig = field(default_factory=DecodeConfig)
    seed: int = 0


@dataclass(frozen=True)
class AblationRow:
    variant: str
    cer: float
    val_top1: float
    train_sources: tuple[str, ...]
    trained_classes: int


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[AblationRow, ...]

    def row(self, variant: str) -> AblationRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def table(self) -> str:
        lines = [f"{'variant':24s} {'CER':>8s} {'val_top1':>9s} {'classes':>8s}  sources"]
        for r in self.rows:
            lines.append(
                f"{r.variant:24s} {r.cer:8.4f} {r.val_top1:9.4f} {r.trained_classes:8d}"
                f"  {','.join(r.train_sources)}"
            )
        return "\n".join(lines)


def _classifier_decode_fn(params: EncoderParams, catalog: GlyphCatalog, cfg: DecodeConfig):
    """Character decoding with an argmax head instead of retrieval."""
    from .core import normalize_crop
    from .decode import infer_spaces, order_boxes

    def decode(image: GrayImage) -> str:
        boxes = localize_chars(image, cfg.direction)
        if not boxes:
            return ""
        perm = order_boxes(boxes, cfg.direction)
        ordered = [boxes[i] for i in perm]
        crops = [
            normalize_crop(crop(image, b), out_size=params.arch.input_hw[0]) for b in ordered
        ]
        ids = classify_crops(params, crops)
        spaces = infer_spaces(ordered, cfg)
        pieces = []
        for j, cid in enumerate(ids):
            pieces.append(catalog.label(int(cid)))
            if j in spaces:
                pieces.append(" ")
        return "".join(pieces)

    return decode


def _remap_to_covered(
    crops: Sequence[LabeledCrop], catalog: GlyphCatalog
) -> tuple[list[LabeledCrop], GlyphCatalog, dict[int, int]]:
    """Restrict to the classes the crops actually cover (the no-renders
    variant cannot train classes it has never seen)."""
    covered = sorted({c.class_id for c in crops})
    sub_catalog = GlyphCatalog(catalog.label(cid) for cid in covered)
    remap = {cid: i for i, cid in enumerate(covered)}
    remapped = [LabeledCrop(c.image, remap[c.class_id], c.source, c.aug_seed) for c in crops]
    return remapped, sub_catalog, remap


def ablation_suite(inputs: AblationInputs) -> AblationReport:
    """Train and score the four comparison variants under one seed.

    baseline        two-stage training with hard negatives, retrieval head
    hard_neg_off    single-stage training, no hard negatives
    no_synth        target-annotation/silver crops only (renders excluded)
    classifier_head softmax classification head instead of retrieval
    """
    test_pairs = [(s.image, s.transcript) for s in inputs.eval_lines]
    combined = list(inputs.synth_crops) + list(inputs.target_crops)
    cfg = inputs.trainer_cfg
    rows = []

    params, hist = train(combined, inputs.catalog, cfg, seed=inputs.seed)
    bundle = ModelBundle(
        params, build_index(params, inputs.exemplar_font, inputs.catalog), inputs.decode_cfg
    )
    rows.append(
        AblationRow(
            "baseline",
            eval_corpus(bundle, test_pairs).aggregate_cer,
            hist[-1].val_top1,
            tuple(sorted({c.source for c in combined})),
            len(inputs.catalog),
        )
    )

    params, hist = train_single_stage(combined, inputs.catalog, cfg, seed=inputs.seed)
    bundle = ModelBundle(
        params, build_index(params, inputs.exemplar_font, inputs.catalog), inputs.decode_cfg
    )
    rows.append(
        AblationRow(
            "hard_neg_off",
            eval_corpus(bundle, test_pairs).aggregate_cer,
            hist[-1].val_top1,
            tuple(sorted({c.source for c in combined})),
            len(inputs.catalog),
        )
    )

    target_only = [c for c in combined if c.source != "font-render"]
    if not target_only:
        raise ValueError("no target crops supplied for the no_synth variant")
    remapped, sub_catalog, _ = _remap_to_covered(target_only, inputs.catalog)
    params, hist = train(remapped, sub_catalog, cfg, seed=inputs.seed)
    # The full-catalog index still comes from exemplar renders; classes the
    # variant never trained on are what degrade it.
    full_index = build_index(params, inputs.exemplar_font, inputs.catalog)
    bundle = ModelBundle(params, full_index, inputs.decode_cfg)
    rows.append(
        AblationRow(
            "no_synth",
            eval_corpus(bundle, test_pairs).aggregate_cer,
            hist[-1].val_top1,
            tuple(sorted({c.source for c in target_only})),
            len(sub_catalog),
        )
    )

    params, hist = train_classifier(combined, inputs.catalog, cfg, seed=inputs.seed)
    decode_fn = _classifier_decode_fn(params, inputs.catalog, inputs.decode_cfg)
    rows.append(
        AblationRow(
            "classifier_head",
            eval_corpus(decode_fn, test_pairs).aggregate_cer,
            hist[-1].val_top1,
            tuple(sorted({c.source for c in combined})),
            len(inputs.catalog),
        )
    )
    return AblationReport(tuple(rows))
