import numpy as np
import pytest
from scipy import ndimage

from retrocr.bitmap_font import BUILTIN_STYLES, base_grid, glyph_labels, styled_grid
from retrocr.core import GlyphCatalog, GlyphMissing, GrayImage, TextDirection
from retrocr.fonts import BitmapFont, GlyphDirFont, builtin_fonts, open_font
from retrocr.synth import (
    AugmentConfig,
    GlyphCoverageWarning,
    LineSpec,
    augment,
    compose_line,
    load_crop_dataset,
    load_line_dataset,
    make_crop_dataset,
    make_line_corpus,
    render_label,
    save_crop_dataset,
    save_line_dataset,
)

FONTS = builtin_fonts()
CATALOG = GlyphCatalog.caseless_alphanumeric()


class TestBitmapFontData:
    def test_grid_shapes(self):
        for label in glyph_labels():
            assert base_grid(label).shape == (12, 10)

    def test_all_grids_distinct(self):
        seen = {}
        for label in glyph_labels():
            key = base_grid(label).tobytes()
            assert key not in seen, f"{label} duplicates {seen.get(key)}"
            seen[key] = label

    def test_styles_stay_connected(self):
        # every styled glyph must be one piece (two for the dotted i/j,
        # whose dot may fuse under the heavy style)
        s8 = np.ones((3, 3), dtype=int)
        for label in glyph_labels():
            for style in BUILTIN_STYLES:
                n = ndimage.label(styled_grid(label, style), structure=s8)[1]
                if label in ("i", "j"):
                    assert n in (1, 2), (label, style, n)
                else:
                    assert n == 1, (label, style, n)

    def test_dotted_i(self):
        s8 = np.ones((3, 3), dtype=int)
        assert ndimage.label(base_grid("i"), structure=s8)[1] == 2


class TestRenderGlyph:
    def test_shape_and_ink(self):
        cell = FONTS["builtin:regular"].render(".", 32)
        assert (cell.width, cell.height) == (32, 32)
        assert (cell.array < 0.5).any()

    def test_whitespace_refused(self):
        with pytest.raises(GlyphMissing):
            FONTS["builtin:regular"].render(" ", 32)

    def test_unknown_glyph_refused(self):
        with pytest.raises(GlyphMissing):
            FONTS["builtin:regular"].render("@", 32)

    def test_deterministic(self):
        a = FONTS["builtin:bold"].render("a", 32)
        b = FONTS["builtin:bold"].render("a", 32)
        assert a == b

    def test_size_floor(self):
        with pytest.raises(ValueError):
            FONTS["builtin:regular"].render("a", 4)

    def test_styles_differ(self):
        renders = {s: BitmapFont(s).render("g", 32) for s in BUILTIN_STYLES}
        blobs = {r.array.tobytes() for r in renders.values()}
        assert len(blobs) == len(BUILTIN_STYLES)

    def test_word_label_rendering(self):
        cell = render_label(FONTS["builtin:regular"], "the", 32)
        assert (cell.width, cell.height) == (32, 32)
        assert (cell.array < 0.5).any()
        with pytest.raises(GlyphMissing):
            render_label(FONTS["builtin:regular"], "a b", 32)


class TestGlyphDirFont:
    def test_round_trip_via_png_dir(self, tmp_path):
        from retrocr.core import write_png

        for ch in "ab":
            write_png(FONTS["builtin:regular"].render(ch, 24), tmp_path / f"{ord(ch):04x}.png")
        font = GlyphDirFont(tmp_path)
        assert font.can_render("a") and not font.can_render("z")
        cell = font.render("a", 32)
        assert (cell.width, cell.height) == (32, 32)
        assert open_font(str(tmp_path)).font_id == font.font_id


class TestAugment:
    def test_identity_config(self):
        img = FONTS["builtin:regular"].render("e", 32)
        assert augment(img, AugmentConfig.identity(), 9) == img

    def test_forced_inversion(self):
        img = FONTS["builtin:regular"].render("e", 32)
        cfg = AugmentConfig(
            translate_frac=0.0,
            scale_range=(1.0, 1.0),
            jitter_strength=0.0,
            invert_prob=1.0,
            blur_sigma_range=(0.0, 0.0),
            background_level_range=(1.0, 1.0),
        )
        out = augment(img, cfg, 3)
        assert np.allclose(out.array, 1.0 - img.array)

    def test_deterministic_and_seed_sensitive(self):
        img = FONTS["builtin:regular"].render("k", 32)
        cfg = AugmentConfig()
        a = augment(img, cfg, 17)
        b = augment(img, cfg, 17)
        assert a == b
        # over 100 seeds, outputs are pairwise distinct (the RNG contract)
        blobs = {augment(img, cfg, s).array.tobytes() for s in range(100)}
        assert len(blobs) == 100

    def test_bounds_and_shape_preserved(self):
        img = FONTS["builtin:wide"].render("m", 32)
        for seed in range(20):
            out = augment(img, AugmentConfig(), seed)
            assert (out.width, out.height) == (32, 32)
            assert out.array.min() >= 0.0 and out.array.max() <= 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AugmentConfig(invert_prob=1.5)
        with pytest.raises(ValueError):
            AugmentConfig(scale_range=(1.2, 0.8))
        with pytest.raises(ValueError):
            AugmentConfig(blur_sigma_range=(-1.0, 1.0))


class TestComposeLine:
    def test_horizontal_ordering_and_words(self):
        img, chars, words, text = compose_line(
            LineSpec(text="ab", font_id="builtin:regular"), FONTS, 0
        )
        assert text == "ab"
        assert len(chars) == 2 and len(words) == 1
        assert chars[0].x1 <= chars[1].x0

    def test_word_gap(self):
        img, chars, words, _ = compose_line(
            LineSpec(text="a b", font_id="builtin:regular", word_gap=1.0, glyph_size=32),
            FONTS,
            0,
        )
        assert len(chars) == 2 and len(words) == 2
        assert chars[1].x0 - chars[0].x1 >= 32

    def test_vertical_ordering(self):
        img, chars, _, _ = compose_line(
            LineSpec(
                text="ab", font_id="builtin:regular", direction=TextDirection.VERTICAL_TTB
            ),
            FONTS,
            0,
        )
        assert chars[0].y1 <= chars[1].y0

    def test_boxes_inside_image(self):
        img, chars, words, _ = compose_line(
            LineSpec(text="quick brown", font_id="builtin:oblique", spacing_jitter=0.2),
            FONTS,
            11,
        )
        for box in list(chars) + list(words):
            assert 0 <= box.x0 < box.x1 <= img.width
            assert 0 <= box.y0 < box.y1 <= img.height

    def test_box_count_matches_non_space_chars(self):
        text = "a bc def g"
        _, chars, words, transcript = compose_line(
            LineSpec(text=text, font_id="builtin:condensed"), FONTS, 5
        )
        assert len(chars) == sum(not c.isspace() for c in text)
        assert len(words) == len(text.split())
        assert transcript == text

    def test_unknown_char_raises(self):
        with pytest.raises(GlyphMissing):
            compose_line(LineSpec(text="a@b", font_id="builtin:regular"), FONTS, 0)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            LineSpec(text="   ", font_id="builtin:regular")
        with pytest.raises(ValueError):
            LineSpec(text="ab", font_id="builtin:regular", glyph_size=4)


class TestMakeCropDataset:
    def test_minimal_count(self):
        crops = make_crop_dataset(
            GlyphCatalog("a"), [FONTS["builtin:regular"]], 1, AugmentConfig(), 0
        )
        assert len(crops) == 1
        assert crops[0].source == "font-render"

    def test_count_arithmetic(self):
        cat = GlyphCatalog("abcdefghij")
        fonts = [FONTS["builtin:regular"], FONTS["builtin:bold"], FONTS["builtin:wide"]]
        crops = make_crop_dataset(cat, fonts, 4, AugmentConfig(), 0)
        assert len(crops) == 10 * 3 * 4

    def test_missing_glyph_warns_and_skips(self, tmp_path):
        from retrocr.core import write_png

        # a glyph-dir font covering only 'a'; 'b' renders only from builtin
        write_png(FONTS["builtin:regular"].render("a", 24), tmp_path / f"{ord('a'):04x}.png")
        partial = GlyphDirFont(tmp_path)
        cat = GlyphCatalog("ab")
        with pytest.warns(GlyphCoverageWarning, match="'b'"):
            crops = make_crop_dataset(cat, [FONTS["builtin:bold"], partial], 2, AugmentConfig(), 0)
        assert len(crops) == 2 * 2 + 1 * 2  # builtin covers both, partial only 'a'

    def test_deterministic(self):
        cat = GlyphCatalog("xy")
        fonts = [FONTS["builtin:regular"]]
        a = make_crop_dataset(cat, fonts, 5, AugmentConfig(), 3)
        b = make_crop_dataset(cat, fonts, 5, AugmentConfig(), 3)
        assert all(x.image == y.image for x, y in zip(a, b))
        c = make_crop_dataset(cat, fonts, 5, AugmentConfig(), 4)
        assert any(x.image != y.image for x, y in zip(a, c))


class TestDatasetIO:
    def test_crop_dataset_round_trip(self, tmp_path):
        cat = GlyphCatalog("ab")
        crops = make_crop_dataset(cat, [FONTS["builtin:regular"]], 2, AugmentConfig(), 1)
        save_crop_dataset(crops, tmp_path / "ds", cat)
        loaded, cat2 = load_crop_dataset(tmp_path / "ds")
        assert cat2 == cat
        assert len(loaded) == len(crops)
        assert all(a.class_id == b.class_id and a.source == b.source for a, b in zip(loaded, crops))

    def test_line_dataset_round_trip(self, tmp_path):
        specs = [
            LineSpec(text="ab c", font_id="builtin:regular"),
            LineSpec(text="xyz", font_id="builtin:bold"),
        ]
        samples = make_line_corpus(CATALOG, specs, FONTS, 3)
        save_line_dataset(samples, tmp_path / "lines", CATALOG)
        loaded, cat2 = load_line_dataset(tmp_path / "lines")
        assert cat2 == CATALOG
        assert [s.transcript for s in loaded] == ["ab c", "xyz"]
        assert loaded[0].char_boxes == samples[0].char_boxes
        assert loaded[0].word_boxes == samples[0].word_boxes
        assert loaded[0].char_class_ids == samples[0].char_class_ids
        # PNG storage quantizes to 8 bits
        assert np.abs(loaded[1].image.array - samples[1].image.array).max() <= 0.5 / 255
