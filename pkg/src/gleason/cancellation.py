"""
Run lifetime: SIGINT/SIGTERM cancellation, worker and memory caps, and
removal of partial outputs left by a failed or cancelled command.

Every workflow polls ``ResourceManager.check`` between tiles or batches, so
cancellation and the memory cap take effect at batch granularity.
"""

import logging
import re
import signal
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import psutil

from .errors import ResourceLimitError

logger = logging.getLogger(__name__)

_SIZE_UNITS = {"": 1, "B": 1, "KB": 1024, "MB": 1024**2, "GB": 1024**3}
_SIZE_PATTERN = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([KMG]?B)?\s*$", re.IGNORECASE)


class ResourceManager:
    """Worker cap, process memory cap and the outputs a run has started writing."""

    def __init__(self, max_threads: int | None = None, ram_limit: str | None = None):
        """
        Args:
            max_threads: Upper bound on worker threads, None for no cap
            ram_limit: Resident memory cap such as '8GB' or '512MB'
        """
        self.max_threads = max_threads
        self.ram_limit = self._parse_ram_limit(ram_limit)
        self.partial_outputs: list[Path] = []
        self._lock = threading.Lock()
        self._process = psutil.Process()
        self._cancellation_manager: CancellationManager | None = None

    def set_cancellation_manager(self, cancellation_manager: "CancellationManager") -> None:
        self._cancellation_manager = cancellation_manager

    @property
    def cancellation(self) -> "CancellationManager | None":
        return self._cancellation_manager

    def _parse_ram_limit(self, ram_limit: str | None) -> int | None:
        """Bytes for a size string; None when unset or unparseable."""
        if not ram_limit:
            return None
        match = _SIZE_PATTERN.match(ram_limit)
        if match is None:
            logger.warning(f"Ignoring unparseable RAM limit {ram_limit!r}")
            return None
        value, unit = match.groups()
        return int(float(value) * _SIZE_UNITS[(unit or "").upper()])

    def effective_workers(self, requested: int) -> int:
        if self.max_threads and requested > self.max_threads:
            logger.info(f"Capping workers at {self.max_threads} (requested {requested})")
            return self.max_threads
        return requested

    def check_cancellation(self) -> None:
        """Raise KeyboardInterrupt once the run has been cancelled."""
        if self._cancellation_manager is not None:
            self._cancellation_manager.check_cancellation()

    def check_memory(self) -> None:
        """
        Raises:
            ResourceLimitError: Resident memory is above ``ram_limit``
        """
        if self.ram_limit is None:
            return
        try:
            rss = self._process.memory_info().rss
        except (psutil.Error, OSError):
            return
        if rss > self.ram_limit:
            raise ResourceLimitError(
                f"Resident memory {rss / 1024**2:.0f} MB exceeds the "
                f"{self.ram_limit / 1024**2:.0f} MB limit; lower workers or queue_depth"
            )

    def check(self) -> None:
        """Poll point for workflows: cancellation first, then the memory cap."""
        self.check_cancellation()
        self.check_memory()

    def register_output(self, path: Path | str) -> Path:
        """
        Record a file or a freshly created directory to delete unless the run
        commits. Directories are removed only once empty.
        """
        path = Path(path)
        with self._lock:
            if path not in self.partial_outputs:
                self.partial_outputs.append(path)
        return path

    def commit_outputs(self) -> None:
        with self._lock:
            self.partial_outputs.clear()

    def cleanup_outputs(self) -> bool:
        """
        Delete registered outputs that are still on disk.

        Returns:
            False if any file could not be removed
        """
        with self._lock:
            pending, self.partial_outputs = self.partial_outputs, []
        if pending:
            logger.info(f"Removing {len(pending)} partial output(s)")

        removed_all = True
        # newest first, so files go before the directories holding them
        for path in reversed(pending):
            try:
                if path.is_dir():
                    path.rmdir()
                else:
                    path.unlink(missing_ok=True)
            except OSError as e:
                logger.warning(f"Could not remove partial output {path}: {e}")
                removed_all = False
            else:
                logger.debug(f"Removed partial output {path}")
        return removed_all

    def get_system_info(self) -> dict[str, Any]:
        """CPU and memory snapshot plus the configured caps; empty on failure."""
        try:
            memory = psutil.virtual_memory()
            cpu_count = psutil.cpu_count()
        except (psutil.Error, OSError) as e:
            logger.warning(f"Could not read system resources: {e}")
            return {}

        info: dict[str, Any] = {
            "cpu_count": cpu_count,
            "memory_total": memory.total,
            "memory_available": memory.available,
            "memory_percent": memory.percent,
            "max_threads": self.max_threads or cpu_count,
            "ram_limit": self.ram_limit,
        }
        if self.ram_limit:
            info["ram_limit_percent"] = memory.available / self.ram_limit * 100
        return info


class CancellationManager:
    """Turns SIGINT/SIGTERM into a cancellation flag polled by the workflows."""

    def __init__(self, resource_manager: ResourceManager):
        self.resource_manager = resource_manager
        self.cancelled = False
        self._original_signal_handlers: dict[int, Any] = {}
        self._lock = threading.Lock()

    def setup_signal_handlers(self) -> None:
        # signal.signal only works on the main thread
        if threading.current_thread() is not threading.main_thread():
            logger.debug("Not on the main thread; signal handlers not installed")
            return

        def on_signal(signum, frame):
            logger.info(f"Received {signal.Signals(signum).name}, stopping after current batch")
            self.cancel()

        for sig in (signal.SIGTERM, signal.SIGINT):
            self._original_signal_handlers[sig] = signal.signal(sig, on_signal)

    def restore_signal_handlers(self) -> None:
        for sig, handler in self._original_signal_handlers.items():
            signal.signal(sig, handler)
        self._original_signal_handlers.clear()

    def cancel(self) -> bool:
        """Record cancellation; idempotent."""
        with self._lock:
            already = self.cancelled
            self.cancelled = True
        if not already:
            logger.info("Cancellation requested")
        return True

    def is_cancelled(self) -> bool:
        with self._lock:
            return self.cancelled

    def check_cancellation(self) -> None:
        if self.is_cancelled():
            raise KeyboardInterrupt("Operation cancelled")


@contextmanager
def managed_resources(max_threads: int | None = None, ram_limit: str | None = None):
    """
    Scope one command run.

    Outputs registered inside the block survive only if the block completes;
    an exception or cancellation deletes them.

    Yields:
        ResourceManager wired to a CancellationManager
    """
    resources = ResourceManager(max_threads, ram_limit)
    cancellation = CancellationManager(resources)
    resources.set_cancellation_manager(cancellation)
    cancellation.setup_signal_handlers()
    try:
        yield resources
        resources.commit_outputs()
    finally:
        cancellation.restore_signal_handlers()
        resources.cleanup_outputs()
