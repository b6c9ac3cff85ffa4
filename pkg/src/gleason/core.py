"""
Workflow orchestration: dataset preparation, slide prediction, overlay
rendering and evaluation.

Each workflow wraps module errors in :class:`PipelineError` so a failure
names its stage, slide and tile.
"""

import itertools
import logging
from collections import Counter
from collections.abc import Iterator, Sequence
from contextlib import ExitStack, contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from tqdm import tqdm

from .annotation import GleasonClass, load_annotations
from .cancellation import ResourceManager
from .config import PipelineConfig
from .dataset import (
    LabeledTile,
    balance_splits,
    class_distribution,
    filter_questionable,
    label_tiles,
    read_manifest,
    stratified_split,
    write_manifest,
)
from .errors import (
    DuplicatePredictionError,
    EmptyJoinError,
    OutputValidationError,
    PipelineError,
    UnmatchedInputError,
)
from .export import ReportExporter
from .inference import (
    BackendPool,
    Prediction,
    PredictionWriter,
    classify_batch,
    read_predictions_csv,
)
from .metrics import MetricsReport, evaluate_predictions
from .overlay import overlay_tile, reconstruct_overlay
from .parallel import ordered_map
from .preprocess import TilePreprocessor, fit_stain_target, save_channel_stats
from .progress import ProgressEmitter, WorkflowStage
from .schema import validate_csv_structure
from .timing import MetricsCollector, Stage
from .wsi import (
    Coord,
    Slide,
    SlideWriter,
    Tile,
    TileGrid,
    iter_tiles,
    open_slide,
    tile_grid,
)

logger = logging.getLogger(__name__)

SLIDE_SUFFIXES = (".tif", ".tiff", ".svs", ".png")
ANNOTATION_SUFFIXES = (".geojson", ".json")

TileKey = tuple[str, int, int]


@contextmanager
def pipeline_stage(stage: str, slide_id: str | None = None, coord: Coord | None = None):
    """Re-raise any error from the block as a PipelineError carrying context."""
    try:
        yield
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(stage, e, slide_id, coord) from e


def _files_by_stem(directory: Path, suffixes: Sequence[str]) -> dict[str, Path]:
    if not directory.is_dir():
        raise UnmatchedInputError(f"Not a directory: {directory}")
    return {
        path.stem: path
        for path in sorted(directory.iterdir())
        if path.is_file() and path.suffix.lower() in suffixes
    }


def match_inputs(slides_dir: Path, annotations_dir: Path) -> list[tuple[Path, Path]]:
    """
    Pair every slide with the annotation document sharing its file stem.

    Raises:
        UnmatchedInputError: A slide has no annotation, or there are no slides
    """
    slides = _files_by_stem(Path(slides_dir), SLIDE_SUFFIXES)
    annotations = _files_by_stem(Path(annotations_dir), ANNOTATION_SUFFIXES)
    if not slides:
        raise UnmatchedInputError(f"No slides found in {slides_dir}")

    unmatched = sorted(set(slides) - set(annotations))
    if unmatched:
        raise UnmatchedInputError(
            f"No annotation document for slide(s): {', '.join(unmatched)}"
        )
    orphans = sorted(set(annotations) - set(slides))
    if orphans:
        logger.warning(f"Ignoring annotation(s) without a slide: {', '.join(orphans)}")
    return [(slides[stem], annotations[stem]) for stem in sorted(slides)]


@dataclass
class PrepareResult:
    manifest_path: Path
    tiles: list[LabeledTile]
    distribution: dict[str, Counter]
    tiles_seen: int = 0


@dataclass
class PredictResult:
    slide_id: str
    n_tiles: int
    overlay_path: Path
    csv_path: Path
    label_counts: Counter = field(default_factory=Counter)


class _Workflow:
    """Shared wiring: config, progress events, run metrics and resources."""

    command = ""

    def __init__(
        self,
        config: PipelineConfig,
        progress: ProgressEmitter | None = None,
        metrics: MetricsCollector | None = None,
        resources: ResourceManager | None = None,
    ):
        self.config = config
        self.progress = progress or ProgressEmitter(enabled=False)
        self.metrics = metrics or MetricsCollector(self.command)
        self.resources = resources or ResourceManager()
        self.workers = self.resources.effective_workers(config.workers)
        self.metrics.set_configuration_metrics(
            workers=self.workers,
            tile_size_px=config.tile_size_px,
            backend=f"{config.backend.kind}:{config.backend.locator}",
        )

    def _check(self) -> None:
        self.resources.check()

    def _validate_csv(self, path: Path, layout: str) -> None:
        if not validate_csv_structure(path, layout):
            raise OutputValidationError(f"{path} is not a well-formed {layout} CSV")

    @contextmanager
    def _stage(self, timing_stage: Stage, progress_stage: WorkflowStage) -> Iterator[None]:
        self.progress.start_stage(progress_stage)
        self.metrics.start_stage(timing_stage)
        try:
            yield
        except BaseException as e:
            self.progress.emit_error(str(e), progress_stage)
            raise
        finally:
            self.metrics.finish_stage(timing_stage)
        self.progress.complete_stage()


class DatasetPreparer(_Workflow):
    """Slides + annotations -> labeled, split, balanced tile dataset."""

    command = "prepare"

    def prepare(self, slides_dir: Path, annotations_dir: Path, out_dir: Path) -> PrepareResult:
        """
        Run tiling, coverage, labeling, filtering, splitting, balancing and
        manifest writing.

        Args:
            slides_dir: Directory of slide files
            annotations_dir: Directory of GeoJSON documents named after the slides
            out_dir: Output directory for ``manifest.csv`` and ``tiles/``

        Returns:
            PrepareResult with the manifest path and the kept tiles
        """
        config = self.config
        pairs = match_inputs(slides_dir, annotations_dir)
        logger.info(f"Preparing dataset from {len(pairs)} slide(s)")

        with ExitStack() as stack:
            slides: dict[str, Slide] = {}
            labeled: list[LabeledTile] = []
            tiles_seen = 0

            with self._stage(Stage.LABELING, WorkflowStage.LABELING):
                for index, (slide_path, annotation_path) in enumerate(pairs):
                    self._check()
                    slide_id = slide_path.stem
                    with pipeline_stage("tiling", slide_id):
                        slide = stack.enter_context(open_slide(slide_path))
                        grid = tile_grid(slide, config.tile_size_px)
                    with pipeline_stage("annotation", slide_id):
                        annotations = load_annotations(annotation_path, slide)
                    if annotations.rois and annotations.labels() == {
                        GleasonClass.QUESTIONABLE
                    }:
                        logger.warning(
                            f"{slide_id}: annotation holds only Questionable ROIs; "
                            "no tiles will be kept"
                        )
                    with pipeline_stage("labeling", slide_id):
                        labeled += label_tiles(
                            slide_id,
                            grid,
                            annotations,
                            config.tissue_threshold,
                            config.artefact_threshold,
                            workers=self.workers,
                            check=self._check,
                        )
                    slides[slide_id] = slide
                    tiles_seen += len(grid)
                    self.metrics.count(slides_processed=1, tiles_processed=len(grid))
                    self.progress.update_progress(index + 1, len(pairs))

            with self._stage(Stage.SPLITTING, WorkflowStage.SPLITTING):
                with pipeline_stage("splitting"):
                    kept = filter_questionable(labeled)
                    kept = stratified_split(kept, config.split)
                    kept = balance_splits(kept, config.balance, config.split.seed)
            self.metrics.count(tiles_labeled=len(kept))
            if not kept:
                logger.warning("No labeled tiles remain; the manifest will be empty")

            written = itertools.count(1)

            def on_tile(tile: LabeledTile) -> None:
                self.progress.update_progress(next(written), len(kept))

            with self._stage(Stage.MANIFEST, WorkflowStage.MANIFEST):
                with pipeline_stage("manifest"):
                    manifest_path = write_manifest(
                        kept,
                        out_dir,
                        slides,
                        config.tile_size_px,
                        workers=self.workers,
                        on_tile=on_tile,
                        register=self.resources.register_output,
                        check=self._check,
                    )
                    self._validate_csv(manifest_path, "manifest")

        distribution = class_distribution(kept)
        logger.info(
            f"Kept {len(kept)} of {tiles_seen} tiles; manifest written to {manifest_path}"
        )
        return PrepareResult(manifest_path, kept, distribution, tiles_seen)


class SlidePredictor(_Workflow):
    """
    Streams one slide through read -> preprocess -> classify -> blend.

    Batches of ``backend.batch_size`` tiles in grid order are processed by
    ``workers`` threads; a single consumer writes predictions and overlay
    tiles in grid order.
    """

    command = "predict"

    def __init__(
        self,
        config: PipelineConfig,
        progress: ProgressEmitter | None = None,
        metrics: MetricsCollector | None = None,
        resources: ResourceManager | None = None,
        pool: BackendPool | None = None,
        transport=None,
    ):
        super().__init__(config, progress, metrics, resources)
        self.preprocessor = TilePreprocessor(config)
        self._owns_pool = pool is None
        if pool is None:
            with pipeline_stage("backend"):
                pool = BackendPool(config.backend, config.input_side, transport)
        self.pool = pool

    def close(self) -> None:
        if self._owns_pool:
            self.pool.close()

    def __enter__(self) -> "SlidePredictor":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def _batches(self, coords: list[Coord]) -> Iterator[list[Coord]]:
        size = self.config.backend.batch_size
        for start in range(0, len(coords), size):
            yield coords[start : start + size]

    def _process_batch(
        self, slide: Slide, grid: TileGrid, coords: list[Coord]
    ) -> list[tuple[Prediction, Tile]]:
        config = self.config
        slide_id = slide.slide_id
        backend = self.pool.get()

        tiles: list[Tile] = []
        tensors = []
        reads = iter_tiles(slide, grid, coords)
        for coord in coords:
            with pipeline_stage("read", slide_id, coord), self.metrics.timed(Stage.READ):
                tile = next(reads)
            with pipeline_stage("preprocess", slide_id, coord), self.metrics.timed(
                Stage.PREPROCESS
            ):
                tensors.append(self.preprocessor(tile, slide_id))
            tiles.append(tile)

        with pipeline_stage("classify", slide_id, coords[0]), self.metrics.timed(
            Stage.CLASSIFY
        ):
            probs = classify_batch(backend, tensors, config.backend.batch_size, config.input_side)
        self.metrics.count(batches_classified=1)

        results = []
        for tile, p in zip(tiles, probs, strict=True):
            with pipeline_stage("blend", slide_id, tile.coord), self.metrics.timed(Stage.BLEND):
                blended = overlay_tile(tile, p, config.color_map)
            results.append((Prediction(slide_id, tile.coord, p), blended))
        return results

    def predict(self, slide_path: Path, out_overlay: Path, out_csv: Path) -> PredictResult:
        """
        Classify every tile of a slide and write the overlay and predictions CSV.

        Both outputs are removed again if the run fails or is cancelled.

        Args:
            slide_path: Slide file
            out_overlay: Output pyramidal TIFF
            out_csv: Output predictions CSV (grid order)

        Returns:
            PredictResult with tile count and per-class label counts
        """
        out_overlay = self.resources.register_output(out_overlay)
        out_csv = self.resources.register_output(out_csv)
        slide_id = Path(slide_path).stem

        try:
            with pipeline_stage("open", slide_id):
                slide = open_slide(slide_path)
            with slide:
                result = self._predict_open(slide, out_overlay, out_csv)
        except BaseException:
            for path in (out_csv, out_overlay):
                path.unlink(missing_ok=True)
            raise
        return result

    def _predict_open(self, slide: Slide, out_overlay: Path, out_csv: Path) -> PredictResult:
        config = self.config
        grid = tile_grid(slide, config.tile_size_px)
        coords = grid.coords
        logger.info(
            f"Predicting {slide.slide_id}: {grid.cols}x{grid.rows} tiles, "
            f"{self.workers} worker(s), backend {config.backend.kind}"
        )
        counts: Counter = Counter()

        with self._stage(Stage.PREDICTION, WorkflowStage.PREDICTION):
            with (
                pipeline_stage("reconstruct", slide.slide_id),
                SlideWriter(out_overlay, slide, config.tile_size_px) as writer,
                PredictionWriter(out_csv) as csv_writer,
            ):
                batches = ordered_map(
                    lambda batch: self._process_batch(slide, grid, batch),
                    self._batches(coords),
                    self.workers,
                    max_pending=self.workers * config.queue_depth,
                    check=self._check,
                )
                # Progress events own stdout when enabled.
                with tqdm(
                    total=len(coords),
                    desc=f"Predicting {slide.slide_id}",
                    unit="tiles",
                    disable=self.progress.enabled,
                    leave=False,
                ) as pbar:
                    for results in batches:
                        for prediction, tile in results:
                            csv_writer.write(prediction)
                            writer.add(tile)
                            counts[prediction.label] += 1
                        pbar.update(len(results))
                        self.metrics.count(tiles_processed=len(results))
                        self.progress.update_progress(csv_writer.count, len(coords))
                self.metrics.start_stage(Stage.RECONSTRUCT)
            self.metrics.finish_stage(Stage.RECONSTRUCT)
            with pipeline_stage("validate", slide.slide_id):
                self._validate_csv(out_csv, "predictions")
        self.metrics.count(slides_processed=1)

        logger.info(f"Wrote {out_csv} and {out_overlay} ({len(coords)} tiles)")
        return PredictResult(slide.slide_id, len(coords), out_overlay, out_csv, counts)


class OverlayRenderer(_Workflow):
    """Re-renders an overlay from an existing predictions CSV."""

    command = "render"

    def render(self, slide_path: Path, predictions_csv: Path, out_overlay: Path) -> Path:
        """
        Tint a slide from stored predictions without running a classifier.

        Rows for other slides in the CSV are ignored.
        """
        out_overlay = self.resources.register_output(out_overlay)
        slide_id = Path(slide_path).stem
        with pipeline_stage("read-predictions", slide_id):
            predictions = [
                p for p in read_predictions_csv(predictions_csv) if p.slide_id == slide_id
            ]
        with pipeline_stage("open", slide_id):
            slide = open_slide(slide_path)

        done = itertools.count(1)

        def on_tile(coord: Coord) -> None:
            self.progress.update_progress(next(done), len(predictions))

        with slide, self._stage(Stage.RECONSTRUCT, WorkflowStage.RECONSTRUCTION):
            with pipeline_stage("reconstruct", slide_id):
                reconstruct_overlay(
                    slide,
                    predictions,
                    self.config.color_map,
                    out_overlay,
                    self.config.tile_size_px,
                    workers=self.workers,
                    on_tile=on_tile,
                    check=self._check,
                )
        self.metrics.count(slides_processed=1, tiles_processed=len(predictions))
        return out_overlay


def join_predictions(
    predictions: Sequence[Prediction], truths: Sequence[LabeledTile]
) -> tuple[list[tuple[Prediction, LabeledTile]], dict[str, int]]:
    """
    Inner join on (slide_id, col, row), sorted by key.

    Returns:
        Joined pairs and counts of unmatched prediction and truth rows

    Raises:
        DuplicatePredictionError: Two predictions share a key
    """
    by_key: dict[TileKey, Prediction] = {}
    for prediction in predictions:
        key = (prediction.slide_id, *prediction.coord)
        if key in by_key:
            raise DuplicatePredictionError(f"Duplicate prediction for {key}")
        by_key[key] = prediction

    truth_keys: set[TileKey] = set()
    joined = []
    for truth in truths:
        key = (truth.slide_id, *truth.coord)
        truth_keys.add(key)
        if key in by_key:
            joined.append((by_key[key], truth))
    joined.sort(key=lambda pair: pair[1].sort_key)

    unmatched = {
        "predictions": sum(1 for key in by_key if key not in truth_keys),
        "truth": len(truth_keys) - len(joined),
    }
    return joined, unmatched


class PredictionEvaluator(_Workflow):
    """Predictions CSV + truth manifest -> metrics report files."""

    command = "evaluate"

    def evaluate(
        self,
        predictions_csv: Path,
        truth_manifest: Path,
        report_path: Path,
        split: str | None = None,
        embed_metrics: bool = False,
    ) -> MetricsReport:
        """
        Join predictions with manifest labels and write the report.

        Args:
            predictions_csv: Output of ``predict``
            truth_manifest: Output of ``prepare``
            report_path: JSON report; the text table goes next to it
            split: Only evaluate manifest rows of this split
            embed_metrics: Add this run's timings and counters to the JSON report

        Returns:
            The computed MetricsReport

        Raises:
            EmptyJoinError: No prediction matches a labeled truth row
        """
        config = self.config
        with self._stage(Stage.EVALUATION, WorkflowStage.EVALUATION):
            with pipeline_stage("evaluate"):
                predictions = read_predictions_csv(predictions_csv)
                truths = [
                    t
                    for t in read_manifest(truth_manifest)
                    if t.label is not None and t.label.is_model_class
                ]
                if split is not None:
                    truths = [t for t in truths if t.split == split]

                joined, unmatched = join_predictions(predictions, truths)
                if unmatched["predictions"] or unmatched["truth"]:
                    logger.warning(
                        f"{unmatched['predictions']} prediction row(s) and "
                        f"{unmatched['truth']} truth row(s) did not join"
                    )
                if not joined:
                    raise EmptyJoinError(
                        f"No prediction in {predictions_csv} matches a labeled row of "
                        f"{truth_manifest}"
                    )

                report = evaluate_predictions(
                    [int(p.label) for p, _ in joined],
                    [int(t.label) for _, t in joined],
                    [p.probs.probs for p, _ in joined],
                    artefact_mode=config.artefact_mode,
                    fine_scope=config.fine_scope,
                )
                report.settings["split"] = split
                report.unmatched = unmatched
        self.metrics.count(tiles_processed=len(joined))

        report_path = self.resources.register_output(report_path)
        self.resources.register_output(ReportExporter(report_path).text_path)
        with self._stage(Stage.EXPORT, WorkflowStage.EXPORT):
            with pipeline_stage("export"):
                ReportExporter(report_path).export(
                    report,
                    sources={
                        "predictions": Path(predictions_csv).name,
                        "truth": Path(truth_manifest).name,
                    },
                    metrics_data=self.metrics.get_current_metrics().to_json_metrics()
                    if embed_metrics
                    else None,
                )
        return report


def fit_stain_file(reference: Path, out: Path) -> dict[str, Any]:
    """Fit a Reinhard target on a reference image and save it as JSON."""
    reference = Path(reference)
    with pipeline_stage("fit-stain", reference.stem):
        with open_slide(reference) as slide:
            pixels = slide.read_region(0, 0, slide.width_px, slide.height_px)
        stats = fit_stain_target(pixels)
        save_channel_stats(stats, out)
    logger.info(f"Stain target from {reference.name} written to {out}")
    return {"mean": stats.mean, "std": stats.std, "space": stats.space}
