"""
Tile labeling, filtering, stratified splitting, balancing and manifests.
"""

import csv
import logging
import math
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np

from .annotation import (
    MODEL_CLASSES,
    AnnotationSet,
    CoverageVector,
    GleasonClass,
    tile_coverage,
)
from .config import SPLITS, BalanceSpec, SplitSpec
from .errors import InvalidBalanceSpecError, SlideWriteError
from .parallel import ordered_map
from .wsi import Coord, Slide, TileGrid, read_tile

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = [
    "slide_id",
    "col",
    "row",
    "label",
    "split",
    *(f"cov_{cls.short}" for cls in MODEL_CLASSES),
    "path",
]

NO_SPLIT = "none"
UNLABELED = "Unlabeled"

TISSUE_CLASSES = (
    GleasonClass.REGULAR,
    GleasonClass.GLEASON3,
    GleasonClass.GLEASON4,
    GleasonClass.GLEASON5,
    GleasonClass.QUESTIONABLE,
)
ARTEFACT_CLASSES = (GleasonClass.ARTEFACT_EMPTY, GleasonClass.ARTEFACT_SPONGE)


@dataclass(frozen=True)
class LabeledTile:
    """Tile metadata with its label, coverage and split assignment."""

    slide_id: str
    coord: Coord
    label: GleasonClass | None
    coverage: CoverageVector
    split: str = NO_SPLIT
    path: str | None = None

    @property
    def sort_key(self) -> tuple[str, int, int]:
        return (self.slide_id, self.coord[0], self.coord[1])


def assign_label(
    coverage: CoverageVector,
    tissue_threshold: float = 0.5,
    artefact_threshold: float = 0.9,
) -> GleasonClass | None:
    """
    Class of a tile from its coverage, or ``None`` when unlabeled.

    Tissue classes (including Questionable) need strictly more than
    ``tissue_threshold`` coverage; artefact classes strictly more than
    ``artefact_threshold``. Two qualifying classes leave the tile unlabeled.
    """
    qualifying = [cls for cls in TISSUE_CLASSES if coverage[cls] > tissue_threshold]
    qualifying += [
        cls for cls in ARTEFACT_CLASSES if coverage[cls] > artefact_threshold
    ]
    if len(qualifying) == 1:
        return qualifying[0]
    if len(qualifying) > 1:
        logger.warning(
            "Tile qualifies for several classes "
            f"({', '.join(cls.label for cls in qualifying)}); left unlabeled"
        )
    return None


def label_tiles(
    slide_id: str,
    grid: TileGrid,
    annotations: AnnotationSet,
    tissue_threshold: float = 0.5,
    artefact_threshold: float = 0.9,
    workers: int = 1,
    check: Callable[[], None] | None = None,
) -> list[LabeledTile]:
    """
    Coverage and label for every grid tile, in grid order.

    Tiles are labeled on ``workers`` threads; ``check`` runs before each
    tile is submitted and may raise to stop the run.
    """

    def label_one(coord: Coord) -> LabeledTile:
        coverage = tile_coverage(grid.rect(coord), annotations)
        label = assign_label(coverage, tissue_threshold, artefact_threshold)
        return LabeledTile(slide_id, coord, label, coverage)

    return list(ordered_map(label_one, grid, workers, check=check))


def filter_questionable(tiles: Iterable[LabeledTile]) -> list[LabeledTile]:
    """Drop Questionable and unlabeled tiles, preserving order."""
    return [
        tile
        for tile in tiles
        if tile.label is not None and tile.label is not GleasonClass.QUESTIONABLE
    ]


def apportion(count: int, ratios: Sequence[float]) -> list[int]:
    """
    Largest-remainder apportionment of ``count`` items.

    Each share gets ``floor(count * ratio)``; leftovers go one by one to the
    largest fractional remainders, ties broken in ratio order.
    """
    exact = [count * ratio for ratio in ratios]
    shares = [math.floor(value + 1e-9) for value in exact]
    remainders = [value - share for value, share in zip(exact, shares, strict=True)]
    leftover = max(count - sum(shares), 0)
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        shares[i] += 1
    return shares


def _split_by_class(tiles: list[LabeledTile], spec: SplitSpec) -> dict[int, str]:
    by_class: dict[GleasonClass, list[int]] = {}
    for index, tile in enumerate(tiles):
        by_class.setdefault(tile.label, []).append(index)

    assignment: dict[int, str] = {}
    for label, indices in by_class.items():
        indices = sorted(indices, key=lambda i: tiles[i].sort_key)
        rng = np.random.default_rng([spec.seed, int(label)])
        shuffled = [indices[i] for i in rng.permutation(len(indices))]
        start = 0
        for split, size in zip(SPLITS, apportion(len(indices), spec.ratios), strict=True):
            for index in shuffled[start : start + size]:
                assignment[index] = split
            start += size
    return assignment


def _split_by_slide(tiles: list[LabeledTile], spec: SplitSpec) -> dict[int, str]:
    slide_ids = sorted({tile.slide_id for tile in tiles})
    rng = np.random.default_rng([spec.seed, len(GleasonClass)])
    shuffled = [slide_ids[i] for i in rng.permutation(len(slide_ids))]

    slide_split: dict[str, str] = {}
    start = 0
    for split, size in zip(SPLITS, apportion(len(slide_ids), spec.ratios), strict=True):
        for slide_id in shuffled[start : start + size]:
            slide_split[slide_id] = split
        start += size
    return {index: slide_split[tile.slide_id] for index, tile in enumerate(tiles)}


def stratified_split(tiles: Sequence[LabeledTile], spec: SplitSpec) -> list[LabeledTile]:
    """
    Assign train/val/test per class with seeded shuffling.

    Per class, tiles are ordered by (slide_id, col, row), shuffled with a
    generator seeded by (seed, class) and apportioned by largest remainder.
    With ``spec.group_by_slide`` whole slides are apportioned instead.

    Args:
        tiles: Tiles carrying model-class labels
        spec: Split ratios and seed

    Returns:
        Copies of the tiles, in input order, with ``split`` set
    """
    tiles = list(tiles)
    if spec.group_by_slide:
        assignment = _split_by_slide(tiles, spec)
    else:
        assignment = _split_by_class(tiles, spec)
    return [replace(tile, split=assignment[i]) for i, tile in enumerate(tiles)]


def balance_class(
    tiles_in_split: Sequence[LabeledTile], spec: BalanceSpec, seed: int
) -> list[LabeledTile]:
    """
    Downsample the target class to at most ``target_fraction`` of the split.

    Keeps ``k = floor(f / (1 - f) * N_other)`` target tiles chosen uniformly
    with a seeded generator (all of them when fewer are available); other
    tiles are untouched and order is preserved.
    """
    fraction = spec.target_fraction
    if not 0.0 < fraction < 1.0:
        raise InvalidBalanceSpecError(f"target_fraction must be in (0, 1), got {fraction}")
    target = spec.target_class

    target_indices = [i for i, tile in enumerate(tiles_in_split) if tile.label == target]
    n_other = len(tiles_in_split) - len(target_indices)
    keep_count = math.floor(fraction / (1.0 - fraction) * n_other + 1e-9)
    if len(target_indices) <= keep_count:
        return list(tiles_in_split)

    rng = np.random.default_rng([seed, int(target)])
    kept = set(rng.choice(np.array(target_indices), size=keep_count, replace=False).tolist())
    logger.debug(
        f"Balanced {target.label}: kept {keep_count} of {len(target_indices)} "
        f"against {n_other} other tiles"
    )
    return [
        tile
        for i, tile in enumerate(tiles_in_split)
        if tile.label != target or i in kept
    ]


def balance_splits(
    tiles: Sequence[LabeledTile], specs: Iterable[BalanceSpec], seed: int
) -> list[LabeledTile]:
    """Apply every balance spec to the splits it names; order is preserved."""
    result = list(tiles)
    for spec in specs:
        for split in spec.applies_to:
            members = [tile for tile in result if tile.split == split]
            kept = {id(tile) for tile in balance_class(members, spec, seed)}
            result = [tile for tile in result if tile.split != split or id(tile) in kept]
    return result


def class_distribution(tiles: Iterable[LabeledTile]) -> dict[str, Counter]:
    """Per-split class counts; the ``"all"`` key holds the totals."""
    counts: dict[str, Counter] = {split: Counter() for split in (*SPLITS, "all")}
    for tile in tiles:
        if tile.label is None:
            continue
        counts.setdefault(tile.split, Counter())[tile.label] += 1
        counts["all"][tile.label] += 1
    return counts


def tile_filename(slide_id: str, coord: Coord) -> str:
    return f"{slide_id}_{coord[0]}_{coord[1]}.png"


def _manifest_row(tile: LabeledTile, path: str) -> dict[str, str]:
    row = {
        "slide_id": tile.slide_id,
        "col": str(tile.coord[0]),
        "row": str(tile.coord[1]),
        "label": tile.label.label if tile.label is not None else UNLABELED,
        "split": tile.split,
        "path": path,
    }
    for cls in MODEL_CLASSES:
        row[f"cov_{cls.short}"] = f"{tile.coverage[cls]:.6f}"
    return row


def write_manifest(
    tiles: Sequence[LabeledTile],
    out_dir: Path | str,
    slides: Mapping[str, Slide],
    tile_size_px: int = 1024,
    workers: int = 1,
    on_tile: Callable[[LabeledTile], None] | None = None,
    register: Callable[[Path], Path] | None = None,
    check: Callable[[], None] | None = None,
) -> Path:
    """
    Write one PNG per tile plus ``manifest.csv`` into ``out_dir``.

    Args:
        tiles: Labeled tiles, written in the given order
        out_dir: Output directory (created when missing)
        slides: Open slides keyed by slide id
        tile_size_px: Tile side used for reading
        workers: Threads encoding PNGs
        on_tile: Called after each tile image is written
        register: Called with every path about to be created, before it is
            written, so a failed run can remove it
        check: Called before each tile is submitted; may raise to stop

    Returns:
        Path of the manifest CSV
    """
    out_dir = Path(out_dir)
    tile_dir = out_dir / "tiles"
    if register is not None:
        for directory in (out_dir, tile_dir):
            if not directory.exists():
                register(directory)
    try:
        tile_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise SlideWriteError(f"Cannot create {tile_dir}: {e}") from e

    def write_png(tile: LabeledTile) -> str:
        pixels = read_tile(slides[tile.slide_id], tile.coord, tile_size_px).pixels
        target = tile_dir / tile_filename(tile.slide_id, tile.coord)
        if register is not None:
            register(target)
        if not cv2.imwrite(str(target), cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)):
            raise SlideWriteError(f"Failed to write tile image {target}")
        return target.relative_to(out_dir).as_posix()

    paths = []
    for tile, path in zip(tiles, ordered_map(write_png, tiles, workers, check=check)):
        paths.append(path)
        if on_tile is not None:
            on_tile(tile)

    manifest_path = out_dir / "manifest.csv"
    if register is not None:
        register(manifest_path)
    try:
        with open(manifest_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
            writer.writeheader()
            for tile, path in zip(tiles, paths, strict=True):
                writer.writerow(_manifest_row(tile, path))
    except OSError as e:
        raise SlideWriteError(f"Failed to write manifest {manifest_path}: {e}") from e

    logger.info(f"Manifest with {len(tiles)} tiles written to {manifest_path}")
    return manifest_path


def _parse_label(text: str) -> GleasonClass | None:
    if text == UNLABELED or not text:
        return None
    try:
        return GleasonClass.from_label(text)
    except ValueError:
        return GleasonClass.from_short(text)


def read_manifest(path: Path | str) -> list[LabeledTile]:
    """Read a manifest CSV back into LabeledTile records."""
    tiles = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            coverage = CoverageVector.from_mapping(
                {cls: float(row[f"cov_{cls.short}"]) for cls in MODEL_CLASSES}
            )
            tiles.append(
                LabeledTile(
                    slide_id=row["slide_id"],
                    coord=(int(row["col"]), int(row["row"])),
                    label=_parse_label(row["label"]),
                    coverage=coverage,
                    split=row["split"],
                    path=row["path"],
                )
            )
    return tiles
