"""Command-line entry point wiring the pipeline into reproducible workflows.

Every subcommand is a pure function of (config, inputs, seed); the resolved
config is snapshotted into the output directory so any artifact can be
rebuilt. Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evaluation
from .contrastive import TrainerConfig, train
from .core import GlyphCatalog, GrayImage, RetrocrError, TextDirection, read_png
from .decode import DecodeConfig, ModelBundle, generate_silver
from .encoder import load_weights, save_weights
from .fonts import FontSource, open_font
from .index import build_index, load_index, save_index
from .synth import (
    AugmentConfig,
    LineSpec,
    make_crop_dataset,
    make_line_corpus,
    load_crop_dataset,
    load_line_dataset,
    save_crop_dataset,
    save_line_dataset,
    derive_seed,
)


class ConfigError(RetrocrError):
    """A RunConfig document failed validation."""


@dataclass(frozen=True)
class LineRenderConfig:
    count: int = 200
    min_words: int = 2
    max_words: int = 5
    min_word_len: int = 2
    max_word_len: int = 6
    glyph_size: int = 32
    spacing_jitter: float = 0.1
    word_gap: float = 0.75
    direction: str = "horizontal"

    def __post_init__(self):
        if self.count < 1 or self.min_words < 1 or self.min_word_len < 1:
            raise ConfigError("render.lines counts must be positive")
        if self.max_words < self.min_words or self.max_word_len < self.min_word_len:
            raise ConfigError("render.lines ranges must be ordered")
        if self.direction not in ("horizontal", "vertical"):
            raise ConfigError("render.lines.direction must be horizontal or vertical")


@dataclass(frozen=True)
class RenderConfig:
    variants_per_class: int = 20
    lines: LineRenderConfig = field(default_factory=LineRenderConfig)


@dataclass(frozen=True)
class FontConfig:
    train: tuple[str, ...] = (
        "builtin:bold",
        "builtin:heavy",
        "builtin:oblique",
        "builtin:backslant",
        "builtin:condensed",
        "builtin:wide",
    )
    exemplar: str = "builtin:regular"


@dataclass(frozen=True)
class CatalogConfig:
    kind: str = "alnum36"
    path: Optional[str] = None

    def load(self) -> GlyphCatalog:
        if self.kind == "alnum36":
            return GlyphCatalog.caseless_alphanumeric()
        if self.kind == "file":
            if not self.path:
                raise ConfigError("catalog.kind=file needs catalog.path")
            return GlyphCatalog.from_file(self.path)
        raise ConfigError(f"unknown catalog.kind {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    """Single JSON document driving every subcommand."""

    seed: int = 0
    workers: int = 0  # 0 = available cores, capped at 4
    catalog: CatalogConfig = field(default_factory=CatalogConfig)
    fonts: FontConfig = field(default_factory=FontConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def effective_workers(self) -> int:
        import os

        if self.workers > 0:
            return self.workers
        return min(4, os.cpu_count() or 1)


_TUPLE_FIELDS = {"scale_range", "blur_sigma_range", "background_level_range", "train"}


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config: {path or 'document'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"config: unknown key {(path + '.' if path else '') + key!r}")
    kwargs = {}
    for name, value in data.items():
        sub_path = f"{path}.{name}" if path else name
        if name in _NESTED:
            kwargs[name] = _build_dataclass(_NESTED[name], value, sub_path)
        elif name == "direction" and cls is DecodeConfig:
            kwargs[name] = TextDirection(value)
        elif name in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {path or 'document'}: {exc}") from exc


_NESTED = {
    "catalog": CatalogConfig,
    "fonts": FontConfig,
    "augment": AugmentConfig,
    "trainer": TrainerConfig,
    "decode": DecodeConfig,
    "render": RenderConfig,
    "lines": LineRenderConfig,
}


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError(f"config: invalid JSON: {exc}") from exc
    return _build_dataclass(RunConfig, data, "")


def _config_snapshot(cfg: RunConfig) -> dict:
    def unwrap(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {k: unwrap(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, TextDirection):
            return obj.value
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    out = {k: unwrap(v) for k, v in dataclasses.asdict(cfg).items()}
    out["decode"]["direction"] = cfg.decode.direction.value
    return out


def _save_snapshot(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(_config_snapshot(cfg), indent=1, sort_keys=True), encoding="utf-8"
    )


def _open_fonts(cfg: RunConfig) -> tuple[dict[str, FontSource], FontSource]:
    train_fonts = {}
    for spec in cfg.fonts.train:
        font = open_font(spec)
        train_fonts[font.font_id] = font
    return train_fonts, open_font(cfg.fonts.exemplar)


def _random_line_texts(catalog: GlyphCatalog, lc: LineRenderConfig, seed: int) -> list[str]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    letters = [lab for lab in catalog.labels if len(lab) == 1]
    texts = []
    for _ in range(lc.count):
        n_words = int(rng.integers(lc.min_words, lc.max_words + 1))
        words = []
        for _ in range(n_words):
            n = int(rng.integers(lc.min_word_len, lc.max_word_len + 1))
            words.append("".join(letters[int(i)] for i in rng.integers(0, len(letters), n)))
        texts.append(" ".join(words))
    return texts


def _load_lines(path: str) -> list:
    samples, _ = load_line_dataset(path)
    return samples


def cmd_render(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    _save_snapshot(cfg, out)
    catalog = cfg.catalog.load()
    fonts, _ = _open_fonts(cfg)
    crops = make_crop_dataset(
        catalog, list(fonts.values()), cfg.render.variants_per_class, cfg.augment, cfg.seed
    )
    save_crop_dataset(crops, out / "crops", catalog)
    lc = cfg.render.lines
    texts = _random_line_texts(catalog, lc, derive_seed(cfg.seed, "line-texts"))
    font_ids = sorted(fonts)
    specs = [
        LineSpec(
            text=text,
            font_id=font_ids[i % len(font_ids)],
            direction=TextDirection(lc.direction),
            glyph_size=lc.glyph_size,
            spacing_jitter=lc.spacing_jitter,
            word_gap=lc.word_gap,
        )
        for i, text in enumerate(texts)
    ]
    samples = make_line_corpus(catalog, specs, fonts, derive_seed(cfg.seed, "lines"))
    save_line_dataset(samples, out / "lines", catalog)
    print(f"rendered {len(crops)} crops and {len(samples)} lines under {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    _save_snapshot(cfg, out)
    crops, catalog = load_crop_dataset(args.data)
    params, history = train(crops, catalog, cfg.trainer, seed=cfg.seed)
    save_weights(params, out / "weights.bin")
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_top1"])
        for i, row in enumerate(history, start=1):
            writer.writerow([i, f"{row.loss:.6f}", f"{row.val_top1:.6f}"])
    print(f"trained on {len(crops)} crops; weights at {out / 'weights.bin'}")
    return 0


def cmd_build_index(cfg: RunConfig, args) -> int:
    params = load_weights(args.model)
    if args.words:
        catalog = GlyphCatalog.from_file(args.words)
    else:
        catalog = cfg.catalog.load()
    _, exemplar = _open_fonts(cfg)
    idx = build_index(params, exemplar, catalog)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_index(idx, args.out)
    print(f"indexed {len(idx)} exemplars ({len(catalog)} classes) -> {args.out}")
    return 0


def _bundle_from_args(cfg: RunConfig, args) -> ModelBundle:
    params = load_weights(args.model)
    char_index = load_index(args.index, expected_params=params)
    word_index = None
    mode = cfg.decode.mode
    if getattr(args, "word_index", None):
        word_index = load_index(args.word_index, expected_params=params)
        mode = "word"
    decode_cfg = dataclasses.replace(cfg.decode, mode=mode)
    return ModelBundle(params, char_index, decode_cfg, word_index)


def _collect_images(paths: Sequence[str]) -> list[tuple[str, GrayImage]]:
    out = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            for child in sorted(p.glob("*.png")):
                out.append((str(child), read_png(child)))
        else:
            out.append((str(p), read_png(p)))
    return out


def cmd_ocr(cfg: RunConfig, args) -> int:
    bundle = _bundle_from_args(cfg, args)
    images = _collect_images(args.images)
    workers = cfg.effective_workers()
    records = []
    for path, image in images:
        result = bundle.decode_line(image, workers=workers)
        records.append(
            {
                "path": path,
                "text": result.text,
                "glyphs": [
                    {
                        "box": [g.box.x0, g.box.y0, g.box.x1, g.box.y1],
                        "label": g.label,
                        "similarity": round(g.similarity, 6),
                    }
                    for g in result.glyphs
                ],
                "fallback_events": result.fallback_events,
            }
        )
        print(result.text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record) + "\n")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    bundle = _bundle_from_args(cfg, args)
    samples = _load_lines(args.lines)
    report = evaluation.eval_corpus(
        bundle, [(s.image, s.transcript) for s in samples], workers=cfg.effective_workers()
    )
    print(report.summary())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "aggregate_cer": report.aggregate_cer,
            "line_count": report.line_count,
            "lines_per_sec": report.lines_per_sec,
            "wall_clock_s": report.wall_clock_s,
            "failed_lines": list(report.failed_lines),
            "per_line_cer": list(report.per_line_cer),
        }
        Path(args.out).write_text(json.dumps(payload, indent=1), encoding="utf-8")
    if args.assert_cer is not None and report.aggregate_cer > args.assert_cer:
        print(
            f"CER {report.aggregate_cer:.4f} exceeds asserted bound {args.assert_cer}",
            file=sys.stderr,
        )
        return 1
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    bundle = _bundle_from_args(cfg, args)
    samples = _load_lines(args.lines)
    counts = [int(x) for x in args.worker_counts.split(",")]
    rows = evaluation.bench_throughput(bundle, [s.image for s in samples], counts)
    for row in rows:
        print(f"workers={row.workers} lines/s={row.lines_per_sec:.2f}")
    if args.out:
        evaluation.write_throughput_csv(rows, args.out)
    return 0


def cmd_curve(cfg: RunConfig, args) -> int:
    crops, catalog = load_crop_dataset(args.data)
    samples = _load_lines(args.lines)
    _, exemplar = _open_fonts(cfg)
    fractions = (
        [float(x) for x in args.fractions.split(",")]
        if args.fractions
        else list(evaluation.DEFAULT_FRACTIONS)
    )
    points = evaluation.sample_efficiency(
        samples, fractions, crops, catalog, exemplar, cfg.trainer, cfg.decode, seed=cfg.seed
    )
    for p in points:
        print(f"fraction={p.fraction:.2f} cer={p.cer:.4f} train={p.train_lines} test={p.test_lines}")
    if args.out:
        evaluation.write_curve_csv(points, args.out)
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    catalog = cfg.catalog.load()
    fonts, exemplar = _open_fonts(cfg)
    synth_crops = make_crop_dataset(
        catalog, list(fonts.values()), cfg.render.variants_per_class, cfg.augment, cfg.seed
    )
    samples = _load_lines(args.lines)
    coverage = max(1, int(args.target_coverage * len(catalog)))
    covered = set(range(coverage))
    target_crops = [
        c
        for c in evaluation.harvest_target_crops(samples[: len(samples) // 2])
        if c.class_id in covered
    ]
    eval_lines = samples[len(samples) // 2 :]
    report = evaluation.ablation_suite(
        evaluation.AblationInputs(
            synth_crops=tuple(synth_crops),
            target_crops=tuple(target_crops),
            catalog=catalog,
            exemplar_font=exemplar,
            eval_lines=tuple(eval_lines),
            trainer_cfg=cfg.trainer,
            decode_cfg=cfg.decode,
            seed=cfg.seed,
        )
    )
    print(report.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.table() + "\n", encoding="utf-8")
    return 0


def cmd_silver(cfg: RunConfig, args) -> int:
    params = load_weights(args.model)
    char_index = load_index(args.index, expected_params=params)
    word_catalog = GlyphCatalog.from_file(args.lexicon)
    samples = _load_lines(args.lines)
    crops = generate_silver(
        params,
        char_index,
        [s.image for s in samples],
        word_catalog,
        cap=args.cap,
        cfg=cfg.decode,
    )
    save_crop_dataset(crops, args.out, word_catalog)
    print(f"collected {len(crops)} silver crops -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retrocr",
        description="Retrieval-based OCR: render data, train, index, decode, evaluate.",
    )
    parser.add_argument("--config", help="JSON run configuration (defaults used when omitted)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render crop and line datasets from fonts")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("train", help="train the recognizer on a crop dataset")
    p.add_argument("--data", required=True, help="crop dataset directory")
    p.add_argument("--out", required=True, help="run directory for weights and history")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("build-index", help="build an exemplar index from the exemplar font")
    p.add_argument("--model", required=True, help="weight file")
    p.add_argument("--out", required=True, help="index file to write")
    p.add_argument("--words", help="lexicon file (one word per line) for a word index")
    p.set_defaults(fn=cmd_build_index)

    p = sub.add_parser("ocr", help="decode line images to text")
    p.add_argument("--model", required=True, help="weight file")
    p.add_argument("--index", required=True, help="character index file")
    p.add_argument("--word-index", help="word index file (enables word mode)")
    p.add_argument("--out", help="JSON Lines output file")
    p.add_argument("images", nargs="+", help="PNG files or directories of PNGs")
    p.set_defaults(fn=cmd_ocr)

    p = sub.add_parser("eval", help="score a labeled line dataset")
    p.add_argument("--model", required=True, help="weight file")
    p.add_argument("--index", required=True, help="character index file")
    p.add_argument("--word-index", help="word index file (enables word mode)")
    p.add_argument("--lines", required=True, help="line dataset directory")
    p.add_argument("--out", help="JSON report file")
    p.add_argument(
        "--assert-cer",
        type=float,
        help="exit nonzero when aggregate CER exceeds this bound",
    )
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="measure decoding throughput")
    p.add_argument("--model", required=True, help="weight file")
    p.add_argument("--index", required=True, help="character index file")
    p.add_argument("--word-index", help="word index file (enables word mode)")
    p.add_argument("--lines", required=True, help="line dataset directory")
    p.add_argument("--worker-counts", default="1,2,4", help="comma-separated worker counts")
    p.add_argument("--out", help="CSV output file")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("curve", help="sample-efficiency curve over label fractions")
    p.add_argument("--data", required=True, help="synthetic crop dataset directory")
    p.add_argument("--lines", required=True, help="labeled line dataset directory")
    p.add_argument("--fractions", help="comma-separated fractions (default 0.7,0.5,0.2,0.05,0)")
    p.add_argument("--out", help="CSV output file")
    p.set_defaults(fn=cmd_curve)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    p.add_argument("--lines", required=True, help="labeled line dataset directory")
    p.add_argument(
        "--target-coverage",
        type=float,
        default=0.4,
        help="fraction of catalog classes covered by target crops",
    )
    p.add_argument("--out", help="text report file")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("silver", help="harvest model-labeled word crops")
    p.add_argument("--model", required=True, help="weight file")
    p.add_argument("--index", required=True, help="character index file")
    p.add_argument("--lines", required=True, help="line dataset directory")
    p.add_argument("--lexicon", required=True, help="word list, one per line")
    p.add_argument("--cap", type=int, default=20, help="max silver crops per word")
    p.add_argument("--out", required=True, help="silver dataset directory")
    p.set_defaults(fn=cmd_silver)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    try:
        return args.fn(cfg, args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (RetrocrError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
