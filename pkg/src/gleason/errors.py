"""
Error categories raised by the Gleason grading pipeline.

Every category subclasses both :class:`GleasonError` and the closest builtin
exception, so callers may catch either.
"""


class GleasonError(Exception):
    """Base class for all pipeline errors."""


# wsi_io


class SlideNotFoundError(GleasonError, FileNotFoundError):
    """Slide file does not exist."""


class SlideReadError(GleasonError, OSError):
    """Slide file is unreadable, truncated, or not a supported raster."""


class UnsupportedCodecError(GleasonError, ValueError):
    """Slide uses a compression scheme or pixel layout we cannot decode."""


class TileOutOfGridError(GleasonError, IndexError):
    """Tile coordinate lies outside the slide's tile grid."""


class MissingTileError(GleasonError, ValueError):
    """A tile stream ended without supplying every grid coordinate."""


class DuplicateTileError(GleasonError, ValueError):
    """A tile stream supplied the same grid coordinate twice."""


class SlideWriteError(GleasonError, OSError):
    """Output slide could not be written."""


# annotation


class MalformedAnnotationError(GleasonError, ValueError):
    """Annotation document does not follow the expected GeoJSON layout."""


class UnknownLabelError(GleasonError, ValueError):
    """Annotation carries a class name outside the known label set."""


class DegeneratePolygonError(GleasonError, ValueError):
    """Polygon has fewer than three distinct vertices or zero area."""


class SelfIntersectingPolygonError(GleasonError, ValueError):
    """Polygon ring crosses itself."""


class PolygonHoleError(GleasonError, ValueError):
    """Polygon carries interior rings, which are not supported."""


# dataset


class InvalidSplitSpecError(GleasonError, ValueError):
    """Split ratios are negative or do not sum to one."""


class InvalidBalanceSpecError(GleasonError, ValueError):
    """Balance target fraction is outside (0, 1)."""


# preprocess


class DegenerateStatsError(GleasonError, ValueError):
    """Channel statistics have a zero (or near-zero) standard deviation."""


class InvalidTileError(GleasonError, ValueError):
    """Tile or image has an unexpected shape or dtype."""


# inference


class BackendUnavailableError(GleasonError, RuntimeError):
    """Classifier backend could not be created or reached."""


class ShapeMismatchError(GleasonError, ValueError):
    """Tensor or model shape does not match the interchange contract."""


class NonNormalizableOutputError(GleasonError, ValueError):
    """Backend output is not a probability vector within tolerance."""


class UnsupportedModelError(GleasonError, ValueError):
    """Model file uses an operator set or layout the runtime cannot load."""


class RemoteTransportError(GleasonError, ConnectionError):
    """Remote classifier unreachable after all retries."""


class RemoteProtocolError(GleasonError, ValueError):
    """Remote classifier answered with a malformed or mismatched payload."""


class RemoteHTTPError(GleasonError, RuntimeError):
    """Remote classifier answered with a non-200 status."""

    def __init__(self, status_code: int, message: str):
        super().__init__(message)
        self.status_code = status_code


# overlay


class MissingPredictionError(GleasonError, ValueError):
    """A grid tile has no prediction."""


class DuplicatePredictionError(GleasonError, ValueError):
    """A grid tile has more than one prediction."""


# metrics


class MetricInputError(GleasonError, ValueError):
    """Metric inputs are empty, misaligned, or undefined."""


class EmptyTaskError(GleasonError, ValueError):
    """No tiles remain for a binary task after exclusion."""


# cli / workflows


class ConfigError(GleasonError, ValueError):
    """Configuration file or flag value is invalid."""


class UnmatchedInputError(GleasonError, FileNotFoundError):
    """A slide has no matching annotation document."""


class EmptyJoinError(GleasonError, ValueError):
    """Predictions and truth share no (slide_id, col, row) keys."""


class OutputValidationError(GleasonError, ValueError):
    """A CSV the pipeline just wrote fails its structure check."""


class ResourceLimitError(GleasonError, MemoryError):
    """Process memory went above the configured ram_limit."""


class PipelineError(GleasonError, RuntimeError):
    """A module error raised inside a workflow, tagged with its context."""

    def __init__(
        self,
        stage: str,
        cause: BaseException,
        slide_id: str | None = None,
        coord: tuple[int, int] | None = None,
    ):
        self.stage = stage
        self.slide_id = slide_id
        self.coord = coord
        self.cause = cause
        where = f"stage={stage}"
        if slide_id is not None:
            where += f" slide={slide_id}"
        if coord is not None:
            where += f" tile=({coord[0]},{coord[1]})"
        super().__init__(f"[{where}] {type(cause).__name__}: {cause}")
