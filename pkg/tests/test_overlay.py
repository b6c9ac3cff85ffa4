"""
Tests for heatmap overlays: colors, blending, thresholds and slide reconstruction.
"""

import numpy as np
import pytest

from gleason.annotation import GleasonClass
from gleason.config import ColorMap
from gleason.errors import (
    ConfigError,
    DuplicatePredictionError,
    MissingPredictionError,
    TileOutOfGridError,
)
from gleason.inference import ClassProbabilities, Prediction
from gleason.overlay import (
    blend_tile,
    class_color,
    index_predictions,
    overlay_tile,
    reconstruct_overlay,
    tile_alpha,
)
from gleason.wsi import Tile, open_slide, read_tile, tile_grid

from conftest import gradient_image, one_hot, write_tiff


def white_tile(size: int = 8, valid: int | None = None) -> Tile:
    valid = size if valid is None else valid
    return Tile((0, 0), np.full((size, size, 3), 255, dtype=np.uint8), valid, valid)


def uniform_predictions(slide, tile_size: int) -> list[Prediction]:
    return [
        Prediction(slide.slide_id, coord, ClassProbabilities.uniform())
        for coord in tile_grid(slide, tile_size)
    ]


class TestClassColor:
    """Tests for class_color."""

    def test_default_colors(self):
        cmap = ColorMap()
        assert class_color(GleasonClass.REGULAR, cmap) == (0, 170, 0)
        assert class_color(GleasonClass.GLEASON5, cmap) == (220, 0, 0)

    def test_override(self):
        cmap = ColorMap(colors={"g3": (1, 2, 3)})
        assert class_color(GleasonClass.GLEASON3, cmap) == (1, 2, 3)
        assert class_color(GleasonClass.REGULAR, cmap) == (0, 170, 0)

    def test_questionable_has_no_color(self):
        with pytest.raises(ConfigError):
            class_color(GleasonClass.QUESTIONABLE, ColorMap())

    def test_invalid_color_rejected(self):
        with pytest.raises(ConfigError):
            ColorMap(colors={"g4": (0, 300, 0)})


class TestBlendTile:
    """Tests for blend_tile."""

    def test_zero_alpha_is_identity(self):
        tile = Tile((0, 0), gradient_image(8, 8), 8, 8)
        np.testing.assert_array_equal(blend_tile(tile, (220, 0, 0), 0.0).pixels, tile.pixels)

    def test_full_alpha_is_solid_color(self):
        out = blend_tile(Tile((0, 0), gradient_image(8, 8), 8, 8), (220, 0, 0), 1.0)
        assert (out.pixels == (220, 0, 0)).all()

    def test_half_alpha_rounds_half_up(self):
        out = blend_tile(white_tile(), (255, 0, 0), 0.5)
        assert (out.pixels == (255, 128, 128)).all()

    def test_padding_untouched(self):
        out = blend_tile(white_tile(8, valid=5), (0, 0, 0), 1.0)
        assert (out.pixels[:5, :5] == 0).all()
        assert (out.pixels[5:] == 255).all()
        assert (out.pixels[:, 5:] == 255).all()
        assert (out.valid_w, out.valid_h) == (5, 5)

    def test_source_not_modified(self):
        tile = white_tile()
        blend_tile(tile, (0, 0, 0), 1.0)
        assert (tile.pixels == 255).all()

    def test_alpha_out_of_range(self):
        with pytest.raises(ConfigError):
            blend_tile(white_tile(), (0, 0, 0), 1.5)


class TestOverlayTile:
    """Tests for overlay_tile and tile_alpha."""

    def test_below_threshold_unchanged(self):
        tile = Tile((0, 0), gradient_image(8, 8), 8, 8)
        out = overlay_tile(tile, ClassProbabilities.uniform(), ColorMap(threshold=0.9))
        np.testing.assert_array_equal(out.pixels, tile.pixels)

    def test_at_threshold_tinted(self):
        probs = ClassProbabilities(tuple(one_hot(3, 0.9)))
        out = overlay_tile(white_tile(), probs, ColorMap(threshold=0.9, alpha=1.0))
        assert (out.pixels == (220, 0, 0)).all()

    def test_graded_alpha(self):
        probs = ClassProbabilities(tuple(one_hot(0, 0.5)))
        cmap = ColorMap(alpha=0.8, graded_alpha=True)
        assert tile_alpha(probs, cmap) == pytest.approx(0.4)
        assert tile_alpha(probs, ColorMap(alpha=0.8)) == pytest.approx(0.8)

    def test_artefacts_can_be_left_untinted(self):
        probs = ClassProbabilities(tuple(one_hot(5)))
        tile = white_tile()
        untinted = overlay_tile(tile, probs, ColorMap(alpha=1.0, tint_artefacts=False))
        assert (untinted.pixels == 255).all()
        tinted = overlay_tile(tile, probs, ColorMap(alpha=1.0))
        assert (tinted.pixels == (130, 130, 130)).all()


class TestIndexPredictions:
    """Tests for index_predictions."""

    def setup_method(self):
        self.cmap = ColorMap()

    def test_complete_set(self, small_slide):
        with open_slide(small_slide) as slide:
            by_coord = index_predictions(uniform_predictions(slide, 16), slide, 16)
            assert len(by_coord) == 12

    def test_missing(self, small_slide):
        with open_slide(small_slide) as slide:
            with pytest.raises(MissingPredictionError):
                index_predictions(uniform_predictions(slide, 16)[1:], slide, 16)

    def test_duplicate(self, small_slide):
        with open_slide(small_slide) as slide:
            predictions = uniform_predictions(slide, 16)
            with pytest.raises(DuplicatePredictionError):
                index_predictions(predictions + predictions[:1], slide, 16)

    def test_out_of_grid(self, small_slide):
        with open_slide(small_slide) as slide:
            extra = Prediction(slide.slide_id, (9, 9), ClassProbabilities.uniform())
            with pytest.raises(TileOutOfGridError):
                index_predictions(uniform_predictions(slide, 16) + [extra], slide, 16)


class TestReconstructOverlay:
    """Tests for reconstruct_overlay."""

    def setup_method(self):
        self.cmap = ColorMap()

    def test_uniform_predictions_tint_white_slide_green(self, tmp_path):
        source = write_tiff(
            tmp_path / "white.tif", np.full((40, 48, 3), 255, dtype=np.uint8), mpp=0.5
        )
        out = tmp_path / "overlays" / "white.tif"
        seen = []

        with open_slide(source) as slide:
            reconstruct_overlay(
                slide, uniform_predictions(slide, 16), self.cmap, out, 16, on_tile=seen.append
            )
            coords = tile_grid(slide, 16).coords

        assert seen == coords
        with open_slide(out) as overlay:
            assert (overlay.width_px, overlay.height_px) == (48, 40)
            assert overlay.mpp == pytest.approx((0.5, 0.5))
            # floor(0.65 * 255 + 0.35 * c + 0.5)
            assert (overlay.read_region(0, 0, 48, 40) == (166, 225, 166)).all()

    def test_threshold_leaves_slide_unchanged(self, tmp_path):
        pixels = gradient_image(50, 35)
        source = write_tiff(tmp_path / "src.tif", pixels)
        out = tmp_path / "same.tif"

        with open_slide(source) as slide:
            reconstruct_overlay(
                slide, uniform_predictions(slide, 16), ColorMap(threshold=0.9), out, 16
            )

        with open_slide(out) as overlay:
            np.testing.assert_array_equal(overlay.read_region(0, 0, 50, 35), pixels)

    @pytest.mark.parametrize("graded", [False, True])
    def test_every_tile_matches_independent_blend(self, tmp_path, graded):
        """Textured slide with ragged border tiles; each written tile equals its own blend."""
        cmap = ColorMap(graded_alpha=graded)
        source = write_tiff(tmp_path / "textured.tif", gradient_image(100, 70, 3))
        out = tmp_path / "textured_overlay.tif"

        with open_slide(source) as slide:
            predictions = [
                Prediction(
                    slide.slide_id,
                    coord,
                    ClassProbabilities(tuple(one_hot(i % 6, 0.5 + 0.08 * (i % 6)))),
                )
                for i, coord in enumerate(tile_grid(slide, 16))
            ]
            reconstruct_overlay(slide, predictions, cmap, out, 16, workers=3)
            expected = {
                p.coord: blend_tile(
                    read_tile(slide, p.coord, 16),
                    class_color(p.label, cmap),
                    tile_alpha(p.probs, cmap),
                )
                for p in predictions
            }

        with open_slide(out) as overlay:
            for coord, tile in expected.items():
                written = read_tile(overlay, coord, 16)
                assert (written.valid_w, written.valid_h) == (tile.valid_w, tile.valid_h)
                np.testing.assert_array_equal(written.pixels, tile.pixels, err_msg=str(coord))
        assert expected[(6, 4)].valid_w == 4 and expected[(6, 4)].valid_h == 6

    def test_worker_count_does_not_change_output(self, tmp_path):
        source = write_tiff(tmp_path / "src.tif", gradient_image(100, 70))
        with open_slide(source) as slide:
            predictions = [
                Prediction(slide.slide_id, coord, ClassProbabilities(tuple(one_hot(i % 6))))
                for i, coord in enumerate(tile_grid(slide, 16))
            ]
            reconstruct_overlay(slide, predictions, self.cmap, tmp_path / "a.tif", 16, workers=1)
            reconstruct_overlay(slide, predictions, self.cmap, tmp_path / "b.tif", 16, workers=4)

        assert (tmp_path / "a.tif").read_bytes() == (tmp_path / "b.tif").read_bytes()

    def test_missing_prediction_writes_nothing(self, tmp_path, small_slide):
        out = tmp_path / "partial.tif"
        with open_slide(small_slide) as slide:
            with pytest.raises(MissingPredictionError):
                reconstruct_overlay(
                    slide, uniform_predictions(slide, 16)[:-1], self.cmap, out, 16
                )
        assert not out.exists()

    def test_cancellation_check_aborts_write(self, tmp_path, small_slide):
        out = tmp_path / "cancelled.tif"
        calls = []

        def check():
            calls.append(1)
            if len(calls) > 3:
                raise KeyboardInterrupt

        with open_slide(small_slide) as slide:
            with pytest.raises(KeyboardInterrupt):
                reconstruct_overlay(
                    slide, uniform_predictions(slide, 16), self.cmap, out, 16, check=check
                )
        assert not out.exists()
        assert list(tmp_path.glob(".cancelled.tif*")) == []
