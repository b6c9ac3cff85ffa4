"""
Whole-slide image access: open, tile, read, and write pyramidal TIFFs.

Reading is lazy. TIFF pixels are fetched through tifffile's zarr store so a
gigapixel slide is never materialized; every thread gets its own file handle.
Writing stages level 0 in a disk-backed memmap, builds the box-filtered
pyramid from it, and atomically renames the finished TIFF into place.
"""

import logging
import math
import os
import re
import tempfile
import threading
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import cv2
import numpy as np
import tifffile
import zarr

from .errors import (
    DuplicateTileError,
    InvalidTileError,
    MissingTileError,
    SlideNotFoundError,
    SlideReadError,
    SlideWriteError,
    TileOutOfGridError,
    UnsupportedCodecError,
)

logger = logging.getLogger(__name__)

DEFAULT_TILE_SIZE = 1024
PAD_VALUE = 255

# Output pyramid stops once the largest dimension fits in one of these.
PYRAMID_MIN_SIZE = 1024
TIFF_TILE_SHAPE = (256, 256)

# Tiles of 1024 px span 256 um at this resolution
EXPECTED_MPP = 0.25
MPP_TOLERANCE = 0.2

# JPEG 2000 variants (generic, Aperio YCbCr/RGB, OpenJPEG)
_UNSUPPORTED_COMPRESSION = {33003, 33004, 33005, 34712}

_APERIO_MPP = re.compile(r"MPP\s*=\s*([0-9]*\.?[0-9]+(?:[eE][-+]?\d+)?)")

Coord = tuple[int, int]


class Rect(NamedTuple):
    """Axis-aligned rectangle in level-0 pixel coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)


class Level(NamedTuple):
    downsample: float
    width: int
    height: int


@dataclass(frozen=True)
class Slide:
    """
    An opened slide. Immutable and safe to share across reader threads.

    ``mpp`` is ``None`` when the file records no physical resolution.
    """

    width_px: int
    height_px: int
    levels: tuple[Level, ...]
    mpp: tuple[float, float] | None
    path: Path
    _source: "_PixelSource | None" = field(
        default=None, repr=False, compare=False, hash=False
    )

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise SlideReadError(
                f"Slide dimensions must be positive, got {self.width_px}x{self.height_px}"
            )
        if not self.levels or self.levels[0] != Level(
            1.0, self.width_px, self.height_px
        ):
            raise SlideReadError("Level 0 must match the slide dimensions")
        factors = [level.downsample for level in self.levels]
        if any(b <= a for a, b in zip(factors, factors[1:], strict=False)):
            raise SlideReadError(f"Level downsample factors not increasing: {factors}")
        if self.mpp is not None and min(self.mpp) <= 0:
            raise SlideReadError(f"Invalid microns-per-pixel {self.mpp}")

    @property
    def slide_id(self) -> str:
        return self.path.stem

    def read_region(self, x: int, y: int, width: int, height: int) -> np.ndarray:
        """Read a level-0 RGB region lying inside the slide."""
        if self._source is None:
            raise SlideReadError(f"{self.slide_id}: slide has no pixel source")
        try:
            region = self._source.read(x, y, width, height)
        except (SlideReadError, UnsupportedCodecError):
            raise
        except Exception as e:
            raise SlideReadError(
                f"{self.slide_id}: failed to decode region ({x},{y},{width},{height}): {e}"
            ) from e
        return region

    def close(self) -> None:
        if self._source is not None:
            self._source.close()

    def __enter__(self) -> "Slide":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


@dataclass(frozen=True)
class TileGrid:
    """Row-major enumeration of fixed-size tiles covering the level-0 raster."""

    tile_size_px: int
    cols: int
    rows: int
    width_px: int
    height_px: int

    @property
    def coords(self) -> list[Coord]:
        return [(col, row) for row in range(self.rows) for col in range(self.cols)]

    def __iter__(self) -> Iterator[Coord]:
        for row in range(self.rows):
            for col in range(self.cols):
                yield (col, row)

    def __len__(self) -> int:
        return self.cols * self.rows

    def contains(self, coord: Coord) -> bool:
        col, row = coord
        return 0 <= col < self.cols and 0 <= row < self.rows

    def index(self, coord: Coord) -> int:
        return coord[1] * self.cols + coord[0]

    def valid_extent(self, coord: Coord) -> tuple[int, int]:
        """Width and height of real slide pixels inside the tile."""
        col, row = coord
        size = self.tile_size_px
        return (
            min(size, self.width_px - col * size),
            min(size, self.height_px - row * size),
        )

    def rect(self, coord: Coord) -> Rect:
        """Valid extent of a tile as a level-0 rectangle (padding excluded)."""
        valid_w, valid_h = self.valid_extent(coord)
        x0 = coord[0] * self.tile_size_px
        y0 = coord[1] * self.tile_size_px
        return Rect(float(x0), float(y0), float(x0 + valid_w), float(y0 + valid_h))


@dataclass
class Tile:
    """A full tile buffer; pixels beyond the valid extent hold the pad color."""

    coord: Coord
    pixels: np.ndarray
    valid_w: int
    valid_h: int

    @property
    def valid_pixels(self) -> np.ndarray:
        return self.pixels[: self.valid_h, : self.valid_w]


def _to_rgb(region: np.ndarray, axes: str = "YXS") -> np.ndarray:
    if axes == "SYX":
        region = np.moveaxis(region, 0, -1)
    if region.ndim == 2:
        region = np.repeat(region[:, :, None], 3, axis=2)
    elif region.shape[2] == 1:
        region = np.repeat(region, 3, axis=2)
    elif region.shape[2] >= 4:
        region = region[:, :, :3]
    return np.ascontiguousarray(region, dtype=np.uint8)


class _PixelSource:
    def read(self, x: int, y: int, width: int, height: int) -> np.ndarray:
        raise NotImplementedError

    def close(self) -> None:
        pass


class _ArraySource(_PixelSource):
    """In-memory raster (decoded PNG test fixtures)."""

    def __init__(self, pixels: np.ndarray):
        self.pixels = pixels

    def read(self, x: int, y: int, width: int, height: int) -> np.ndarray:
        return self.pixels[y : y + height, x : x + width].copy()


class _TiffSource(_PixelSource):
    """Level-0 zarr view of a TIFF with one handle per reading thread."""

    def __init__(self, path: Path, axes: str):
        self.path = path
        self.axes = axes
        self._local = threading.local()
        self._lock = threading.Lock()
        self._handles: list[tuple[tifffile.TiffFile, object]] = []

    def _array(self):
        array = getattr(self._local, "array", None)
        if array is None:
            tif = tifffile.TiffFile(self.path)
            store = tif.series[0].aszarr(level=0)
            array = zarr.open(store, mode="r")
            self._local.array = array
            with self._lock:
                self._handles.append((tif, store))
        return array

    def read(self, x: int, y: int, width: int, height: int) -> np.ndarray:
        array = self._array()
        if self.axes == "SYX":
            region = array[:, y : y + height, x : x + width]
        else:
            region = array[y : y + height, x : x + width]
        return _to_rgb(np.asarray(region), self.axes)

    def close(self) -> None:
        with self._lock:
            handles, self._handles = self._handles, []
        for tif, store in handles:
            try:
                store.close()
                tif.close()
            except Exception as e:
                logger.debug(f"Error closing {self.path}: {e}")
        self._local = threading.local()


def _parse_mpp(page: tifffile.TiffPage) -> tuple[float, float] | None:
    description = page.description or ""
    match = _APERIO_MPP.search(description)
    if match:
        value = float(match.group(1))
        if value > 0:
            return (value, value)

    tags = page.tags
    if "XResolution" not in tags or "ResolutionUnit" not in tags:
        return None
    unit = int(tags["ResolutionUnit"].value)
    microns_per_unit = {2: 25400.0, 3: 10000.0}.get(unit)
    if microns_per_unit is None:
        return None

    def per_pixel(tag_name: str) -> float | None:
        if tag_name not in tags:
            return None
        numerator, denominator = tags[tag_name].value
        if numerator <= 0 or denominator <= 0:
            return None
        return microns_per_unit / (numerator / denominator)

    mpp_x = per_pixel("XResolution")
    mpp_y = per_pixel("YResolution") or mpp_x
    if mpp_x is None:
        return None
    return (mpp_x, mpp_y)


def _is_codec_failure(error: Exception) -> bool:
    message = str(error).lower()
    return any(word in message for word in ("imagecodecs", "codec", "compression"))


def _open_tiff(path: Path) -> Slide:
    try:
        with tifffile.TiffFile(path) as tif:
            if not tif.series:
                raise SlideReadError(f"{path}: TIFF contains no image series")
            series = tif.series[0]
            page = series.keyframe
            compression = int(page.compression)
            axes = series.axes
            dtype = series.dtype
            shapes = [level.shape for level in series.levels]
            mpp = _parse_mpp(page)
    except SlideReadError:
        raise
    except Exception as e:
        raise SlideReadError(f"{path}: unreadable TIFF: {e}") from e

    if compression in _UNSUPPORTED_COMPRESSION:
        raise UnsupportedCodecError(
            f"{path}: JPEG 2000 compression ({compression}) is not supported"
        )
    if dtype != np.uint8 or axes not in ("YX", "YXS", "SYX"):
        raise UnsupportedCodecError(
            f"{path}: unsupported pixel layout axes={axes} dtype={dtype}"
        )

    y_axis = 1 if axes == "SYX" else 0
    width, height = shapes[0][y_axis + 1], shapes[0][y_axis]
    levels = [Level(1.0, int(width), int(height))]
    for shape in shapes[1:]:
        level_w, level_h = int(shape[y_axis + 1]), int(shape[y_axis])
        downsample = width / level_w
        if downsample > levels[-1].downsample:
            levels.append(Level(downsample, level_w, level_h))

    source = _TiffSource(path, axes)
    try:
        source.read(0, 0, 1, 1)
    except Exception as e:
        source.close()
        if _is_codec_failure(e):
            raise UnsupportedCodecError(f"{path}: cannot decode tiles: {e}") from e
        raise SlideReadError(f"{path}: cannot decode tiles: {e}") from e

    return Slide(
        width_px=int(width),
        height_px=int(height),
        levels=tuple(levels),
        mpp=mpp,
        path=path,
        _source=source,
    )


def _open_png(path: Path) -> Slide:
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise SlideReadError(f"{path}: unreadable PNG")
    if pixels.dtype != np.uint8:
        raise UnsupportedCodecError(f"{path}: only 8-bit PNG rasters are supported")
    if pixels.ndim == 3 and pixels.shape[2] == 4:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_BGRA2RGB)
    elif pixels.ndim == 3:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB)
    pixels = _to_rgb(pixels)
    height, width = pixels.shape[:2]
    return Slide(
        width_px=width,
        height_px=height,
        levels=(Level(1.0, width, height),),
        mpp=None,
        path=path,
        _source=_ArraySource(pixels),
    )


def open_slide(path: Path | str) -> Slide:
    """
    Open a tiled/strip TIFF (pyramidal or not) or a PNG test raster.

    Args:
        path: Slide file

    Returns:
        Slide with level-0 dimensions, pyramid levels and mpp when recorded

    Raises:
        SlideNotFoundError: File does not exist
        SlideReadError: File is unreadable or truncated
        UnsupportedCodecError: Compression or pixel layout is unsupported
    """
    path = Path(path)
    if not path.is_file():
        raise SlideNotFoundError(f"Slide not found: {path}")

    if path.suffix.lower() == ".png":
        slide = _open_png(path)
    else:
        slide = _open_tiff(path)

    logger.debug(
        f"Opened {slide.slide_id}: {slide.width_px}x{slide.height_px}, "
        f"{len(slide.levels)} level(s), mpp={slide.mpp}"
    )
    if slide.mpp is not None:
        drift = abs(slide.mpp[0] - EXPECTED_MPP) / EXPECTED_MPP
        if drift > MPP_TOLERANCE:
            logger.warning(
                f"{slide.slide_id}: level 0 is {slide.mpp[0]:.3f} um/px; "
                f"tile sizes assume {EXPECTED_MPP} um/px"
            )
    return slide


def tile_grid(slide: Slide, tile_size_px: int = DEFAULT_TILE_SIZE) -> TileGrid:
    """Grid of ``tile_size_px`` tiles covering the slide; last row/column partial."""
    if tile_size_px < 1:
        raise InvalidTileError(f"Tile size must be >= 1, got {tile_size_px}")
    return TileGrid(
        tile_size_px=tile_size_px,
        cols=math.ceil(slide.width_px / tile_size_px),
        rows=math.ceil(slide.height_px / tile_size_px),
        width_px=slide.width_px,
        height_px=slide.height_px,
    )


def read_tile(
    slide: Slide, coord: Coord, tile_size_px: int = DEFAULT_TILE_SIZE
) -> Tile:
    """
    Read one tile, padding border tiles with white beyond the valid extent.

    Raises:
        TileOutOfGridError: Coordinate is outside the grid
        SlideReadError: Pixel data could not be decoded
    """
    grid = tile_grid(slide, tile_size_px)
    if not grid.contains(coord):
        raise TileOutOfGridError(
            f"Tile {coord} outside {grid.cols}x{grid.rows} grid of {slide.slide_id}"
        )
    valid_w, valid_h = grid.valid_extent(coord)
    pixels = np.full((tile_size_px, tile_size_px, 3), PAD_VALUE, dtype=np.uint8)
    pixels[:valid_h, :valid_w] = slide.read_region(
        coord[0] * tile_size_px, coord[1] * tile_size_px, valid_w, valid_h
    )
    return Tile(coord=coord, pixels=pixels, valid_w=valid_w, valid_h=valid_h)


def iter_tiles(
    slide: Slide, grid: TileGrid, coords: Iterable[Coord] | None = None
) -> Iterator[Tile]:
    """Lazily read the tiles at ``coords``, by default all of ``grid`` in row-major order."""
    for coord in grid if coords is None else coords:
        yield read_tile(slide, coord, grid.tile_size_px)


def _downsample_into(src: np.ndarray, dst: np.ndarray, strip_rows: int = 512) -> None:
    """2x2 box filter with round-half-up; odd edges replicate the last row/column."""
    height, width = src.shape[:2]
    for y0 in range(0, dst.shape[0], strip_rows):
        y1 = min(y0 + strip_rows, dst.shape[0])
        block = np.asarray(src[2 * y0 : min(2 * y1, height)], dtype=np.uint16)
        if block.shape[0] < 2 * (y1 - y0):
            block = np.concatenate([block, block[-1:]], axis=0)
        if width % 2:
            block = np.concatenate([block, block[:, -1:]], axis=1)
        summed = (
            block[0::2, 0::2] + block[1::2, 0::2] + block[0::2, 1::2] + block[1::2, 1::2]
        )
        dst[y0:y1] = ((summed + 2) // 4).astype(np.uint8)


def pyramid_shapes(width: int, height: int) -> list[tuple[int, int]]:
    """Level sizes: halve (rounding up) until the largest side is <= 1024."""
    shapes = [(width, height)]
    while max(shapes[-1]) > PYRAMID_MIN_SIZE:
        w, h = shapes[-1]
        shapes.append(((w + 1) // 2, (h + 1) // 2))
    return shapes


class SlideWriter:
    """
    Order-independent tile sink producing a pyramidal tiled TIFF.

    Every grid coordinate must be added exactly once before :meth:`close`.
    Identical inputs produce byte-identical files.
    """

    def __init__(
        self,
        path: Path | str,
        meta: Slide,
        tile_size_px: int = DEFAULT_TILE_SIZE,
    ):
        self.path = Path(path)
        self.meta = meta
        self.grid = tile_grid(meta, tile_size_px)
        self._seen = np.zeros((self.grid.rows, self.grid.cols), dtype=bool)
        self._temp_files: list[Path] = []
        self._closed = False
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._level0 = self._memmap(meta.width_px, meta.height_px)
        except OSError as e:
            self._cleanup()
            raise SlideWriteError(f"Cannot stage output {self.path}: {e}") from e

    def _memmap(self, width: int, height: int) -> np.memmap:
        fd, name = tempfile.mkstemp(
            prefix=f".{self.path.name}.", suffix=".raw", dir=self.path.parent
        )
        os.close(fd)
        self._temp_files.append(Path(name))
        return np.memmap(name, dtype=np.uint8, mode="w+", shape=(height, width, 3))

    def add(self, tile: Tile) -> None:
        """Place one tile's valid extent into the level-0 raster."""
        coord = tuple(tile.coord)
        if not self.grid.contains(coord):
            raise TileOutOfGridError(
                f"Tile {coord} outside {self.grid.cols}x{self.grid.rows} output grid"
            )
        col, row = coord
        if self._seen[row, col]:
            raise DuplicateTileError(f"Tile {coord} supplied more than once")
        size = self.grid.tile_size_px
        if tile.pixels.shape != (size, size, 3) or tile.pixels.dtype != np.uint8:
            raise InvalidTileError(
                f"Tile {coord} must be {size}x{size}x3 uint8, got "
                f"{tile.pixels.shape} {tile.pixels.dtype}"
            )
        valid_w, valid_h = self.grid.valid_extent(coord)
        y0, x0 = row * size, col * size
        self._level0[y0 : y0 + valid_h, x0 : x0 + valid_w] = tile.pixels[
            :valid_h, :valid_w
        ]
        self._seen[row, col] = True

    def missing(self) -> list[Coord]:
        rows, cols = np.nonzero(~self._seen)
        return [(int(c), int(r)) for r, c in zip(rows, cols, strict=True)]

    def close(self) -> None:
        """Validate completeness, write the TIFF and move it into place."""
        if self._closed:
            return
        missing = self.missing()
        if missing:
            self.abort()
            preview = ", ".join(str(c) for c in missing[:5])
            raise MissingTileError(
                f"{len(missing)} tile(s) never supplied for {self.path.name}: {preview}"
            )

        temp_tiff = self.path.with_name(f".{self.path.name}.partial")
        self._temp_files.append(temp_tiff)
        try:
            self._write_tiff(temp_tiff)
            os.replace(temp_tiff, self.path)
        except OSError as e:
            self.abort()
            raise SlideWriteError(f"Failed to write {self.path}: {e}") from e
        except Exception:
            self.abort()
            raise
        self._closed = True
        self._cleanup()
        logger.debug(f"Wrote slide {self.path}")

    def _write_tiff(self, target: Path) -> None:
        shapes = pyramid_shapes(self.meta.width_px, self.meta.height_px)
        levels: list[np.ndarray] = [self._level0]
        for width, height in shapes[1:]:
            level = self._memmap(width, height)
            _downsample_into(levels[-1], level)
            levels.append(level)

        full_size = sum(w * h * 3 for w, h in shapes)
        options = {
            "tile": TIFF_TILE_SHAPE,
            "photometric": "rgb",
            "planarconfig": "contig",
            "compression": "zlib",
            "metadata": None,
            "maxworkers": 1,
        }
        with tifffile.TiffWriter(target, bigtiff=full_size > 2**32 - 2**25) as tif:
            for index, level in enumerate(levels):
                extra: dict = {}
                if index == 0:
                    extra["subifds"] = len(levels) - 1
                else:
                    extra["subfiletype"] = 1
                if self.meta.mpp is not None:
                    factor = 2**index
                    extra["resolution"] = (
                        1e4 / (self.meta.mpp[0] * factor),
                        1e4 / (self.meta.mpp[1] * factor),
                    )
                    extra["resolutionunit"] = "CENTIMETER"
                tif.write(level, **options, **extra)

    def abort(self) -> None:
        """Discard all staged data; the target path is left untouched."""
        self._closed = True
        self._cleanup()

    def _cleanup(self) -> None:
        level0 = getattr(self, "_level0", None)
        if level0 is not None:
            del self._level0
            del level0
        for temp in self._temp_files:
            try:
                temp.unlink(missing_ok=True)
            except OSError as e:
                logger.debug(f"Could not remove {temp}: {e}")
        self._temp_files = []

    def __enter__(self) -> "SlideWriter":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def write_slide(
    tiles: Iterable[Tile],
    meta: Slide,
    path: Path | str,
    tile_size_px: int = DEFAULT_TILE_SIZE,
) -> None:
    """
    Write a tile stream as a deterministic pyramidal tiled TIFF.

    Args:
        tiles: Tiles covering every grid coordinate exactly once, any order
        meta: Slide supplying dimensions and mpp
        path: Output file
        tile_size_px: Grid tile size of the stream

    Raises:
        MissingTileError: A grid coordinate was never supplied
        DuplicateTileError: A grid coordinate was supplied twice
        SlideWriteError: The file could not be written
    """
    with SlideWriter(path, meta, tile_size_px) as writer:
        for tile in tiles:
            writer.add(tile)
