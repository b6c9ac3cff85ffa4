"""
Heatmap overlays: tint each tile with its predicted class color and
reassemble the tinted tiles into a pyramidal slide.
"""

import logging
from collections.abc import Callable, Iterable
from pathlib import Path

import numpy as np

from .annotation import GleasonClass
from .config import ColorMap
from .errors import (
    ConfigError,
    DuplicatePredictionError,
    MissingPredictionError,
    TileOutOfGridError,
)
from .inference import ClassProbabilities, Prediction
from .parallel import ordered_map
from .wsi import DEFAULT_TILE_SIZE, Coord, Slide, SlideWriter, Tile, read_tile, tile_grid

logger = logging.getLogger(__name__)


def class_color(label: GleasonClass, color_map: ColorMap) -> tuple[int, int, int]:
    """Overlay color of a model class."""
    label = GleasonClass(label)
    if not label.is_model_class:
        raise ConfigError(f"{label.label} has no overlay color")
    return color_map.color_for(label)


def blend_tile(tile: Tile, color: tuple[int, int, int], alpha: float) -> Tile:
    """
    Alpha-blend a solid color over the tile's valid extent.

    Each channel becomes ``floor((1 - alpha) * src + alpha * color + 0.5)``;
    the padding outside the valid extent is copied unchanged.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    pixels = tile.pixels.copy()
    if alpha > 0.0:
        region = pixels[: tile.valid_h, : tile.valid_w].astype(np.float64)
        blended = (1.0 - alpha) * region + alpha * np.asarray(color, dtype=np.float64)
        pixels[: tile.valid_h, : tile.valid_w] = np.clip(
            np.floor(blended + 0.5), 0, 255
        ).astype(np.uint8)
    return Tile(coord=tile.coord, pixels=pixels, valid_w=tile.valid_w, valid_h=tile.valid_h)


def tile_alpha(probs: ClassProbabilities, color_map: ColorMap) -> float:
    """Configured alpha, scaled by the argmax probability when graded."""
    if color_map.graded_alpha:
        return color_map.alpha * probs.confidence
    return color_map.alpha


def overlay_tile(tile: Tile, probs: ClassProbabilities, color_map: ColorMap) -> Tile:
    """Tinted tile, or an untouched copy below threshold or for suppressed artefacts."""
    label = probs.label
    if probs.confidence < color_map.threshold:
        return tile
    if label.is_artefact and not color_map.tint_artefacts:
        return tile
    return blend_tile(tile, class_color(label, color_map), tile_alpha(probs, color_map))


def index_predictions(
    predictions: Iterable[Prediction], slide: Slide, tile_size_px: int
) -> dict[Coord, Prediction]:
    """
    Map grid coordinates to predictions, requiring exactly one per tile.

    Raises:
        DuplicatePredictionError: A tile has two predictions
        MissingPredictionError: A tile has no prediction
        TileOutOfGridError: A prediction lies outside the grid
    """
    grid = tile_grid(slide, tile_size_px)
    by_coord: dict[Coord, Prediction] = {}
    for prediction in predictions:
        coord = tuple(prediction.coord)
        if not grid.contains(coord):
            raise TileOutOfGridError(
                f"Prediction for {coord} outside {grid.cols}x{grid.rows} grid"
            )
        if coord in by_coord:
            raise DuplicatePredictionError(f"Tile {coord} has more than one prediction")
        by_coord[coord] = prediction

    missing = [coord for coord in grid if coord not in by_coord]
    if missing:
        preview = ", ".join(str(c) for c in missing[:5])
        raise MissingPredictionError(
            f"{len(missing)} tile(s) of {slide.slide_id} have no prediction: {preview}"
        )
    return by_coord


def reconstruct_overlay(
    slide: Slide,
    predictions: Iterable[Prediction],
    color_map: ColorMap,
    out: Path | str,
    tile_size_px: int = DEFAULT_TILE_SIZE,
    workers: int = 1,
    on_tile: Callable[[Coord], None] | None = None,
    check: Callable[[], None] | None = None,
) -> Path:
    """
    Write the heatmap overlay of a slide.

    Args:
        slide: Source slide
        predictions: Exactly one prediction per grid tile
        color_map: Colors, alpha and threshold
        out: Output TIFF path
        tile_size_px: Grid tile size
        workers: Threads reading and blending tiles
        on_tile: Called with each coordinate as it is written
        check: Cancellation check, called before each tile is scheduled

    Returns:
        The output path
    """
    by_coord = index_predictions(predictions, slide, tile_size_px)
    grid = tile_grid(slide, tile_size_px)

    def render(coord: Coord) -> Tile:
        return overlay_tile(read_tile(slide, coord, tile_size_px), by_coord[coord].probs, color_map)

    with SlideWriter(out, slide, tile_size_px) as writer:
        for tile in ordered_map(render, grid, workers, check=check):
            writer.add(tile)
            if on_tile is not None:
                on_tile(tile.coord)

    logger.info(f"Overlay of {slide.slide_id} written to {out}")
    return Path(out)
