"""
Progress events for long-running workflows.

Events are single JSON lines on stdout so a wrapping process can follow a
run without parsing log output.
"""

import json
import logging
import time
from datetime import datetime
from enum import Enum

logger = logging.getLogger(__name__)


class EventType(str, Enum):
    """Defines types of progress events."""

    STAGE = "stage"
    PROGRESS = "progress"
    COMPLETE = "complete"
    INFO = "info"
    ERROR = "error"


class WorkflowStage(str, Enum):
    """Stages reported by the prepare, predict, evaluate and render workflows."""

    INITIALIZATION = "initialization"
    TILING = "tiling"
    LABELING = "labeling"
    SPLITTING = "splitting"
    MANIFEST = "manifest"
    PREDICTION = "prediction"
    RECONSTRUCTION = "reconstruction"
    EVALUATION = "evaluation"
    EXPORT = "export"
    COMPLETION = "completion"


STAGE_MESSAGES = {
    WorkflowStage.TILING: "Tiling slides...",
    WorkflowStage.LABELING: "Computing ROI coverage and labels...",
    WorkflowStage.SPLITTING: "Splitting and balancing tiles...",
    WorkflowStage.MANIFEST: "Writing tiles and manifest...",
    WorkflowStage.PREDICTION: "Classifying tiles...",
    WorkflowStage.RECONSTRUCTION: "Rendering overlay...",
    WorkflowStage.EVALUATION: "Computing metrics...",
    WorkflowStage.EXPORT: "Exporting results...",
    WorkflowStage.COMPLETION: "Done",
}


class ProgressEmitter:
    """Emits JSON-formatted progress events to stdout."""

    def __init__(self, enabled: bool = True, min_interval: float = 0.5):
        """
        Initialize the progress emitter.

        Args:
            enabled: Emit nothing when False
            min_interval: Minimum seconds between progress events of a stage
        """
        self.enabled = enabled
        self.min_interval = min_interval
        self.current_stage: WorkflowStage | None = None
        self.stage_start_time: float | None = None
        self._last_progress = 0.0
        self._run_start = time.time()

    def emit_event(self, event_type: EventType, **kwargs) -> None:
        """Emit a progress event to stdout."""
        if not self.enabled:
            return

        event = {
            "type": event_type.value,
            "timestamp": datetime.now().isoformat(),
            "elapsed": round(time.time() - self._run_start, 3),
            **kwargs,
        }
        print(json.dumps(event), flush=True)

    def start_stage(self, stage: WorkflowStage, message: str | None = None) -> None:
        """Start a new workflow stage."""
        if not self.enabled:
            return

        self.current_stage = stage
        self.stage_start_time = time.time()
        self._last_progress = 0.0
        if message is None:
            message = STAGE_MESSAGES.get(
                stage, f"Starting {stage.value.replace('_', ' ').title()}"
            )
        self.emit_event(EventType.STAGE, stage=stage.value, message=message)

    def complete_stage(self, message: str | None = None) -> None:
        """Complete the current workflow stage."""
        if not self.enabled or not self.current_stage:
            return

        stage_duration = 0.0
        if self.stage_start_time is not None:
            stage_duration = time.time() - self.stage_start_time

        self.emit_event(
            EventType.COMPLETE,
            stage=self.current_stage.value,
            message=message
            or f"Completed {self.current_stage.value.replace('_', ' ').title()}",
            progress=100,
            stage_duration=stage_duration,
        )
        self.current_stage = None
        self.stage_start_time = None

    def update_progress(self, done: int, total: int, message: str | None = None) -> None:
        """
        Report ``done`` of ``total`` items of the current stage.

        Events are throttled to ``min_interval``; the final item always emits.
        """
        if not self.enabled or not self.current_stage:
            return
        now = time.time()
        if done < total and now - self._last_progress < self.min_interval:
            return
        self._last_progress = now

        percentage = int(100 * done / total) if total else 100
        self.emit_event(
            EventType.PROGRESS,
            stage=self.current_stage.value,
            progress=percentage,
            done=done,
            total=total,
            message=message or f"{done}/{total}",
        )

    def emit_error(self, message: str, stage: WorkflowStage | None = None) -> None:
        if not self.enabled:
            return
        stage = stage or self.current_stage
        self.emit_event(
            EventType.ERROR,
            message=f"Error: {message}",
            stage=stage.value if stage else None,
        )

    def emit_info(self, message: str, data: dict | None = None) -> None:
        if not self.enabled:
            return
        event_data = {"message": message}
        if data:
            event_data.update(data)
        self.emit_event(EventType.INFO, **event_data)
