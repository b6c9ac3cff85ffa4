"""
Run metrics for the pipeline workflows.

Wall-clock timing per stage, tile counters and peak memory, exported as JSON
or in Prometheus text exposition format.
"""

import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import psutil

logger = logging.getLogger(__name__)


class Stage(Enum):
    """Pipeline stages for timing metrics."""

    INITIALIZATION = "initialization"
    TILING = "tiling"
    COVERAGE = "coverage"
    LABELING = "labeling"
    SPLITTING = "splitting"
    BALANCING = "balancing"
    MANIFEST = "manifest"
    PREDICTION = "prediction"
    READ = "read"
    PREPROCESS = "preprocess"
    CLASSIFY = "classify"
    BLEND = "blend"
    RECONSTRUCT = "reconstruct"
    EVALUATION = "evaluation"
    EXPORT = "export"
    TOTAL = "total"


# Stages timed per tile from worker threads; durations accumulate.
PER_TILE_STAGES = frozenset({Stage.READ, Stage.PREPROCESS, Stage.CLASSIFY, Stage.BLEND})


@dataclass
class StageTiming:
    """Timing information for a single stage."""

    stage: Stage
    start_time: float
    end_time: float | None = None
    duration: float | None = None

    def finish(self) -> None:
        """Mark stage as finished and calculate duration."""
        self.end_time = time.time()
        self.duration = self.end_time - self.start_time


@dataclass
class RunMetrics:
    """Metrics of one workflow run."""

    command: str = ""
    stage_timings: dict[Stage, StageTiming] = field(default_factory=dict)
    accumulated: dict[Stage, float] = field(default_factory=dict)
    total_duration: float = 0.0

    slides_processed: int = 0
    tiles_processed: int = 0
    tiles_labeled: int = 0
    batches_classified: int = 0
    memory_peak_mb: float = 0.0

    workers: int = 1
    tile_size_px: int = 0
    backend: str = ""

    def start_stage(self, stage: Stage) -> None:
        """Start timing a stage."""
        self.stage_timings[stage] = StageTiming(stage=stage, start_time=time.time())
        logger.debug(f"Started stage: {stage.value}")

    def finish_stage(self, stage: Stage) -> None:
        """Finish timing a stage."""
        if stage in self.stage_timings:
            self.stage_timings[stage].finish()
            logger.debug(
                f"Finished stage: {stage.value} in {self.stage_timings[stage].duration:.3f}s"
            )

    def finish_total(self) -> None:
        self.finish_stage(Stage.TOTAL)
        self.total_duration = self.stage_timings[Stage.TOTAL].duration

    def get_stage_duration(self, stage: Stage) -> float:
        """Wall-clock duration of a stage, or the summed per-tile time."""
        if stage in self.accumulated:
            return self.accumulated[stage]
        timing = self.stage_timings.get(stage)
        if timing is not None and timing.duration is not None:
            return timing.duration
        return 0.0

    def _observed_stages(self) -> list[Stage]:
        return [
            stage
            for stage in Stage
            if stage != Stage.TOTAL
            and (stage in self.stage_timings or stage in self.accumulated)
        ]

    def to_json_metrics(self) -> dict[str, Any]:
        """Convert metrics to JSON format for export."""
        return {
            "command": self.command,
            "timings": {
                "total_duration_seconds": self.total_duration,
                "stages": {
                    stage.value: {
                        "duration_seconds": self.get_stage_duration(stage),
                        "per_tile": stage in PER_TILE_STAGES,
                        "start_time": self.stage_timings[stage].start_time
                        if stage in self.stage_timings
                        else None,
                        "end_time": self.stage_timings[stage].end_time
                        if stage in self.stage_timings
                        else None,
                    }
                    for stage in self._observed_stages()
                },
            },
            "processing": {
                "slides_processed": self.slides_processed,
                "tiles_processed": self.tiles_processed,
                "tiles_labeled": self.tiles_labeled,
                "batches_classified": self.batches_classified,
                "memory_peak_mb": self.memory_peak_mb,
            },
            "configuration": {
                "workers": self.workers,
                "tile_size_px": self.tile_size_px,
                "backend": self.backend,
            },
        }


class MetricsCollector:
    """Collects run metrics; safe to feed per-tile timings from worker threads."""

    def __init__(self, command: str = ""):
        self.metrics = RunMetrics(command=command)
        self._lock = threading.Lock()
        self._process = psutil.Process()
        self.metrics.start_stage(Stage.TOTAL)

    def __enter__(self):
        """Context manager entry."""
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Context manager exit."""
        self.finish()

    def start_stage(self, stage: Stage) -> None:
        self.metrics.start_stage(stage)

    def finish_stage(self, stage: Stage) -> None:
        self.metrics.finish_stage(stage)
        self.sample_memory()

    def add_duration(self, stage: Stage, seconds: float) -> None:
        """Accumulate time spent in a per-tile stage."""
        with self._lock:
            self.metrics.accumulated[stage] = (
                self.metrics.accumulated.get(stage, 0.0) + seconds
            )

    def timed(self, stage: Stage):
        """Context manager accumulating the duration of its body into ``stage``."""
        return _TimedBlock(self, stage)

    def count(self, **counters: int) -> None:
        """Increment processing counters, e.g. ``count(tiles_processed=1)``."""
        with self._lock:
            for name, value in counters.items():
                setattr(self.metrics, name, getattr(self.metrics, name) + value)

    def set_configuration_metrics(self, workers: int, tile_size_px: int, backend: str = ""):
        self.metrics.workers = workers
        self.metrics.tile_size_px = tile_size_px
        self.metrics.backend = backend

    def sample_memory(self) -> None:
        """Record resident memory if it exceeds the peak seen so far."""
        try:
            rss_mb = self._process.memory_info().rss / 1024**2
        except psutil.Error as e:
            logger.debug(f"Memory sampling failed: {e}")
            return
        with self._lock:
            self.metrics.memory_peak_mb = max(self.metrics.memory_peak_mb, rss_mb)

    def finish(self) -> RunMetrics:
        """Finish metrics collection and return final metrics."""
        if self.metrics.stage_timings[Stage.TOTAL].duration is None:
            self.sample_memory()
            self.metrics.finish_total()
            logger.info(f"Run completed in {self.metrics.total_duration:.3f}s")
        return self.metrics

    def get_current_metrics(self) -> RunMetrics:
        return self.metrics


class _TimedBlock:
    def __init__(self, collector: MetricsCollector, stage: Stage):
        self.collector = collector
        self.stage = stage
        self.start = 0.0

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.collector.add_duration(self.stage, time.perf_counter() - self.start)


def format_prometheus_metrics(metrics: RunMetrics) -> str:
    """
    Format metrics in Prometheus exposition format.

    Args:
        metrics: Run metrics

    Returns:
        Prometheus-formatted metrics string
    """
    command = metrics.command or "unknown"
    lines = []

    lines.append("# HELP gleason_job_duration_seconds Duration of a pipeline run in seconds")
    lines.append("# TYPE gleason_job_duration_seconds counter")
    lines.append(
        f'gleason_job_duration_seconds{{command="{command}",stage="total"}} '
        f"{metrics.total_duration}"
    )
    for stage in Stage:
        if stage != Stage.TOTAL:
            duration = metrics.get_stage_duration(stage)
            lines.append(
                f'gleason_job_duration_seconds{{command="{command}",stage="{stage.value}"}} '
                f"{duration}"
            )

    gauges = [
        ("gleason_slides_processed", "Number of slides processed", metrics.slides_processed),
        ("gleason_tiles_processed", "Number of tiles processed", metrics.tiles_processed),
        ("gleason_tiles_labeled", "Number of tiles given a label", metrics.tiles_labeled),
        (
            "gleason_batches_classified",
            "Number of classifier batches",
            metrics.batches_classified,
        ),
        ("gleason_memory_peak_mb", "Peak resident memory in MB", metrics.memory_peak_mb),
        ("gleason_workers", "Configured worker threads", metrics.workers),
    ]
    for name, help_text, value in gauges:
        lines.append(f"# HELP {name} {help_text}")
        lines.append(f"# TYPE {name} gauge")
        lines.append(f'{name}{{command="{command}"}} {value}')

    return "\n".join(lines) + "\n"
