"""
Pathologist ROI annotations and exact per-class tile coverage.

Annotations arrive as GeoJSON FeatureCollections in level-0 pixel
coordinates, one polygon per feature, each carrying a
``classification.name`` property. Coverage of a tile is computed
analytically by clipping every candidate polygon to the tile rectangle and
taking the shoelace area of the result.
"""

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Any

import geojson
from shapely.geometry import LinearRing, Polygon

from .errors import (
    DegeneratePolygonError,
    MalformedAnnotationError,
    PolygonHoleError,
    SelfIntersectingPolygonError,
    UnknownLabelError,
)
from .wsi import Rect, Slide

logger = logging.getLogger(__name__)

Point = tuple[float, float]

# Pairwise same-class overlap below this share of the tile area is ignored.
OVERLAP_TOLERANCE = 1e-6


class GleasonClass(IntEnum):
    """Annotation classes; the first six are the model classes."""

    REGULAR = 0
    GLEASON3 = 1
    GLEASON4 = 2
    GLEASON5 = 3
    ARTEFACT_EMPTY = 4
    ARTEFACT_SPONGE = 5
    QUESTIONABLE = 6

    @property
    def label(self) -> str:
        """Name used in annotation documents and reports."""
        return _LABELS[self]

    @property
    def short(self) -> str:
        """Short name used in CSV column suffixes and CLI flags."""
        return _SHORT_NAMES[self]

    @property
    def is_artefact(self) -> bool:
        return self in (GleasonClass.ARTEFACT_EMPTY, GleasonClass.ARTEFACT_SPONGE)

    @property
    def is_model_class(self) -> bool:
        return self is not GleasonClass.QUESTIONABLE

    @classmethod
    def from_label(cls, name: str) -> "GleasonClass":
        """Resolve a document label such as ``"Gleason 4"``."""
        for member, label in _LABELS.items():
            if label == name:
                return member
        raise UnknownLabelError(
            f"Unknown class label {name!r}; expected one of {list(_LABELS.values())}"
        )

    @classmethod
    def from_short(cls, name: str) -> "GleasonClass":
        """Resolve a short name such as ``"sponge"`` or ``"art_sponge"``."""
        key = name.strip().lower()
        for member, short in _SHORT_NAMES.items():
            if key in (short, short.removeprefix("art_"), member.name.lower()):
                return member
        raise UnknownLabelError(f"Unknown class name {name!r}")


_LABELS = {
    GleasonClass.REGULAR: "Regular",
    GleasonClass.GLEASON3: "Gleason 3",
    GleasonClass.GLEASON4: "Gleason 4",
    GleasonClass.GLEASON5: "Gleason 5",
    GleasonClass.ARTEFACT_EMPTY: "Artefact Empty",
    GleasonClass.ARTEFACT_SPONGE: "Artefact Sponge",
    GleasonClass.QUESTIONABLE: "Questionable",
}

_SHORT_NAMES = {
    GleasonClass.REGULAR: "regular",
    GleasonClass.GLEASON3: "g3",
    GleasonClass.GLEASON4: "g4",
    GleasonClass.GLEASON5: "g5",
    GleasonClass.ARTEFACT_EMPTY: "art_empty",
    GleasonClass.ARTEFACT_SPONGE: "art_sponge",
    GleasonClass.QUESTIONABLE: "questionable",
}

MODEL_CLASSES: tuple[GleasonClass, ...] = tuple(GleasonClass)[:6]
MALIGNANT_CLASSES = frozenset(
    {GleasonClass.GLEASON3, GleasonClass.GLEASON4, GleasonClass.GLEASON5}
)


@dataclass(frozen=True)
class RoiPolygon:
    """A class-labeled simple polygon in level-0 pixel coordinates."""

    vertices: tuple[Point, ...]
    label: GleasonClass

    @cached_property
    def bbox(self) -> Rect:
        xs = [x for x, _ in self.vertices]
        ys = [y for _, y in self.vertices]
        return Rect(min(xs), min(ys), max(xs), max(ys))

    @property
    def area(self) -> float:
        return polygon_area(self)


@dataclass
class AnnotationSet:
    """Validated ROIs of one slide."""

    slide_id: str
    rois: list[RoiPolygon] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def labels(self) -> set[GleasonClass]:
        return {roi.label for roi in self.rois}


@dataclass(frozen=True)
class CoverageVector:
    """Per-class area fraction of one tile, indexed by :class:`GleasonClass`."""

    fractions: tuple[float, ...] = (0.0,) * len(GleasonClass)
    overlap: bool = False

    def __post_init__(self):
        if len(self.fractions) != len(GleasonClass):
            raise ValueError(
                f"CoverageVector needs {len(GleasonClass)} fractions, "
                f"got {len(self.fractions)}"
            )

    def __getitem__(self, cls: GleasonClass) -> float:
        return self.fractions[int(cls)]

    @classmethod
    def from_mapping(
        cls, values: Mapping[GleasonClass, float], overlap: bool = False
    ) -> "CoverageVector":
        fractions = [0.0] * len(GleasonClass)
        for key, value in values.items():
            fractions[int(key)] = float(value)
        return cls(tuple(fractions), overlap)

    def model_fractions(self) -> tuple[float, ...]:
        """Fractions of the six model classes, in class order."""
        return self.fractions[: len(MODEL_CLASSES)]


def shoelace_area(vertices: Sequence[Point]) -> float:
    """Absolute area of a closed ring given without its closing vertex."""
    n = len(vertices)
    if n < 3:
        return 0.0
    # Relative to the first vertex so collinear rings sum to exactly zero.
    ox, oy = vertices[0]
    twice = 0.0
    for i in range(1, n - 1):
        x0, y0 = vertices[i][0] - ox, vertices[i][1] - oy
        x1, y1 = vertices[i + 1][0] - ox, vertices[i + 1][1] - oy
        twice += x0 * y1 - x1 * y0
    return abs(twice) / 2.0


def polygon_area(poly: RoiPolygon) -> float:
    """
    Area of a simple polygon by the shoelace formula.

    Args:
        poly: Validated ROI (convex or not, any orientation)

    Returns:
        Area in square pixels
    """
    return shoelace_area(poly.vertices)


def clip_polygon_to_rect(vertices: Sequence[Point], rect: Rect) -> list[Point]:
    """
    Clip a polygon to an axis-aligned rectangle (Sutherland-Hodgman).

    The rectangle is convex, so the result has the exact area of the
    intersection even for non-convex input; a result that splits into
    several pieces comes back joined by zero-area edges on the boundary.

    Args:
        vertices: Polygon ring without closing vertex
        rect: Clip rectangle

    Returns:
        Clipped ring, empty when the polygon misses the rectangle
    """
    output = list(vertices)
    # (axis, boundary, keep values >= boundary)
    for axis, bound, keep_above in (
        (0, rect.x0, True),
        (0, rect.x1, False),
        (1, rect.y0, True),
        (1, rect.y1, False),
    ):
        if not output:
            break
        candidates = output
        output = []

        def inside(p: Point) -> bool:
            return p[axis] >= bound if keep_above else p[axis] <= bound

        def crossing(s: Point, e: Point) -> Point:
            t = (bound - s[axis]) / (e[axis] - s[axis])
            if axis == 0:
                return (bound, s[1] + t * (e[1] - s[1]))
            return (s[0] + t * (e[0] - s[0]), bound)

        start = candidates[-1]
        for end in candidates:
            if inside(end):
                if not inside(start):
                    output.append(crossing(start, end))
                output.append(end)
            elif inside(start):
                output.append(crossing(start, end))
            start = end
    return output


def _feature_label(feature: Mapping[str, Any]) -> GleasonClass:
    properties = feature.get("properties") or {}
    classification = properties.get("classification")
    if isinstance(classification, Mapping):
        name = classification.get("name")
    else:
        name = classification
    if not isinstance(name, str):
        raise MalformedAnnotationError(
            "Feature is missing the 'classification.name' property"
        )
    return GleasonClass.from_label(name)


def _polygon_rings(geometry: Mapping[str, Any]) -> list[list]:
    kind = geometry.get("type")
    coordinates = geometry.get("coordinates")
    if not isinstance(coordinates, list):
        raise MalformedAnnotationError(f"{kind} geometry has no coordinate list")
    if kind == "Polygon":
        polygons = [coordinates]
    elif kind == "MultiPolygon":
        polygons = coordinates
    else:
        raise MalformedAnnotationError(
            f"Unsupported geometry type {kind!r}; expected Polygon or MultiPolygon"
        )
    rings = []
    for polygon in polygons:
        if not isinstance(polygon, list) or not polygon:
            raise MalformedAnnotationError("Polygon has no exterior ring")
        if len(polygon) > 1:
            raise PolygonHoleError(
                f"Polygon has {len(polygon) - 1} interior ring(s); holes are not "
                "supported"
            )
        rings.append(polygon[0])
    return rings


def _ring_vertices(ring: list) -> list[Point]:
    try:
        points = [(float(p[0]), float(p[1])) for p in ring]
    except (TypeError, ValueError, IndexError) as e:
        raise MalformedAnnotationError(f"Invalid ring coordinates: {e}") from e

    if len(points) > 1 and points[0] == points[-1]:
        points.pop()
    return _drop_repeats(points)


def _drop_repeats(points: Sequence[Point]) -> list[Point]:
    distinct: list[Point] = []
    for point in points:
        if not distinct or distinct[-1] != point:
            distinct.append(point)
    if len(distinct) > 1 and distinct[0] == distinct[-1]:
        distinct.pop()
    return distinct


def _validate_ring(vertices: list[Point], label: GleasonClass) -> None:
    if len(set(vertices)) < 3:
        raise DegeneratePolygonError(
            f"{label.label} polygon has fewer than 3 distinct vertices"
        )
    if shoelace_area(vertices) <= 0.0:
        raise DegeneratePolygonError(f"{label.label} polygon has zero area")
    if not LinearRing(vertices).is_simple:
        raise SelfIntersectingPolygonError(
            f"{label.label} polygon ring intersects itself"
        )


def _clip_to_slide(
    vertices: list[Point], width: float, height: float
) -> tuple[list[Point], int]:
    """Clip a ring to the slide rectangle; also returns how many vertices fell outside."""
    outside = sum(1 for x, y in vertices if not (0.0 <= x <= width and 0.0 <= y <= height))
    if not outside:
        return vertices, 0
    clipped = clip_polygon_to_rect(vertices, Rect(0.0, 0.0, width, height))
    return _drop_repeats(clipped), outside


def _features(doc: Any) -> list:
    if isinstance(doc, (str, bytes)):
        try:
            doc = geojson.loads(doc)
        except (ValueError, TypeError) as e:
            raise MalformedAnnotationError(f"Annotation is not valid JSON: {e}") from e
    if isinstance(doc, list):
        return doc
    if not isinstance(doc, Mapping):
        raise MalformedAnnotationError(
            f"Annotation document must be a JSON object, got {type(doc).__name__}"
        )
    if doc.get("type") == "Feature":
        return [doc]
    if doc.get("type") != "FeatureCollection" or not isinstance(
        doc.get("features"), list
    ):
        raise MalformedAnnotationError(
            "Annotation document must be a GeoJSON FeatureCollection"
        )
    return doc["features"]


def parse_annotations(doc: Any, slide: Slide) -> AnnotationSet:
    """
    Parse and validate an annotation document against a slide.

    Args:
        doc: GeoJSON text, parsed mapping, or a list of features
        slide: Slide the annotation belongs to

    Returns:
        AnnotationSet with one ROI per polygon

    Raises:
        MalformedAnnotationError: Document layout is wrong
        UnknownLabelError: A feature carries an unknown class name
        DegeneratePolygonError: A polygon has <3 distinct vertices or zero area
        SelfIntersectingPolygonError: A polygon ring crosses itself
        PolygonHoleError: A polygon carries interior rings
    """
    annotations = AnnotationSet(slide_id=slide.slide_id)

    for index, feature in enumerate(_features(doc)):
        if not isinstance(feature, Mapping) or not isinstance(
            feature.get("geometry"), Mapping
        ):
            raise MalformedAnnotationError(f"Feature {index} has no geometry object")
        label = _feature_label(feature)
        for ring in _polygon_rings(feature["geometry"]):
            if not isinstance(ring, list):
                raise MalformedAnnotationError(f"Feature {index} ring is not a list")
            vertices = _ring_vertices(ring)
            _validate_ring(vertices, label)

            vertices, outside = _clip_to_slide(
                vertices, float(slide.width_px), float(slide.height_px)
            )
            if outside:
                message = (
                    f"{slide.slide_id}: feature {index} ({label.label}) has {outside} "
                    f"out-of-bounds vertices; clipped to the slide rectangle"
                )
                logger.warning(message)
                annotations.warnings.append(message)
                if len(vertices) < 3 or shoelace_area(vertices) <= 0.0:
                    raise DegeneratePolygonError(
                        f"{label.label} polygon lies outside the slide"
                    )

            annotations.rois.append(RoiPolygon(tuple(vertices), label))

    logger.debug(f"Parsed {len(annotations.rois)} ROIs for {slide.slide_id}")
    return annotations


def load_annotations(path: Path, slide: Slide) -> AnnotationSet:
    """Read and parse a GeoJSON annotation file."""
    try:
        with open(path, encoding="utf-8") as f:
            doc = geojson.load(f)
    except (ValueError, TypeError) as e:
        # JSONDecodeError, or a geometry geojson refuses to build
        raise MalformedAnnotationError(f"{path}: not a valid GeoJSON document: {e}") from e
    return parse_annotations(doc, slide)


def _boxes_intersect(a: Rect, b: Rect) -> bool:
    return a.x0 < b.x1 and b.x0 < a.x1 and a.y0 < b.y1 and b.y0 < a.y1


def _same_class_overlap(pieces: list[list[Point]], tile_area: float) -> bool:
    shapes = [Polygon(piece) for piece in pieces if len(piece) >= 3]
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            shared = shapes[i].buffer(0).intersection(shapes[j].buffer(0)).area
            if shared > OVERLAP_TOLERANCE * tile_area:
                return True
    return False


def tile_coverage(
    tile_rect: Rect,
    annotations: AnnotationSet | Iterable[RoiPolygon],
    prune: bool = True,
) -> CoverageVector:
    """
    Per-class area fraction of a tile's valid extent.

    Args:
        tile_rect: Valid extent of a grid tile (padding excluded)
        annotations: ROIs to measure
        prune: Skip ROIs whose bounding box misses the tile

    Returns:
        CoverageVector; ``overlap`` is set when same-class ROIs overlap inside
        the tile (that class is clamped to 1.0) or class fractions sum above 1
    """
    rois = annotations.rois if isinstance(annotations, AnnotationSet) else annotations
    tile_area = tile_rect.area
    if tile_area <= 0:
        return CoverageVector()

    areas = [0.0] * len(GleasonClass)
    pieces: dict[GleasonClass, list[list[Point]]] = {}
    for roi in rois:
        if prune and not _boxes_intersect(roi.bbox, tile_rect):
            continue
        clipped = clip_polygon_to_rect(roi.vertices, tile_rect)
        area = shoelace_area(clipped)
        if area <= 0.0:
            continue
        areas[int(roi.label)] += area
        pieces.setdefault(roi.label, []).append(clipped)

    overlap = False
    fractions = [area / tile_area for area in areas]
    for label, class_pieces in pieces.items():
        if len(class_pieces) > 1 and _same_class_overlap(class_pieces, tile_area):
            overlap = True
            logger.warning(
                f"Overlapping {label.label} ROIs inside tile {tuple(tile_rect)}; "
                "coverage clamped to 1.0"
            )
        fractions[int(label)] = min(fractions[int(label)], 1.0)

    if sum(fractions) > 1.0 + 1e-9:
        overlap = True

    return CoverageVector(tuple(fractions), overlap)
