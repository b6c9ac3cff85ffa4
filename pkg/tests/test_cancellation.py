"""
Tests for cancellation, worker caps and partial-output cleanup.
"""

import signal
import threading
from unittest.mock import patch

import psutil
import pytest

from gleason.cancellation import CancellationManager, ResourceManager, managed_resources
from gleason.errors import ResourceLimitError


class TestResourceManager:
    """Tests for ResourceManager."""

    def test_initialization(self):
        rm = ResourceManager()
        assert rm.max_threads is None
        assert rm.ram_limit is None
        assert rm.partial_outputs == []

        rm = ResourceManager(max_threads=4, ram_limit="2GB")
        assert rm.max_threads == 4
        assert rm.ram_limit == 2 * 1024**3

    def test_parse_ram_limit(self):
        rm = ResourceManager()
        assert rm._parse_ram_limit("1GB") == 1024**3
        assert rm._parse_ram_limit("512mb") == 512 * 1024**2
        assert rm._parse_ram_limit("1024KB") == 1024 * 1024
        assert rm._parse_ram_limit("1024B") == 1024
        assert rm._parse_ram_limit("1024") == 1024
        assert rm._parse_ram_limit("lots") is None
        assert rm._parse_ram_limit("") is None
        assert rm._parse_ram_limit(None) is None

    def test_effective_workers(self):
        rm = ResourceManager(max_threads=2)
        assert rm.effective_workers(8) == 2
        assert rm.effective_workers(1) == 1
        assert ResourceManager().effective_workers(8) == 8

    def test_cleanup_removes_registered_outputs(self, tmp_path):
        rm = ResourceManager()
        written = tmp_path / "overlay.tif"
        written.write_bytes(b"partial")
        rm.register_output(written)
        rm.register_output(written)
        rm.register_output(tmp_path / "never_written.csv")
        assert len(rm.partial_outputs) == 2

        assert rm.cleanup_outputs() is True
        assert not written.exists()
        assert rm.partial_outputs == []

    def test_committed_outputs_survive(self, tmp_path):
        rm = ResourceManager()
        written = tmp_path / "predictions.csv"
        written.write_text("slide_id\n")
        rm.register_output(written)
        rm.commit_outputs()

        assert rm.cleanup_outputs() is True
        assert written.exists()

    def test_cleanup_removes_created_directories(self, tmp_path):
        rm = ResourceManager()
        tile_dir = rm.register_output(tmp_path / "dataset" / "tiles")
        tile_dir.mkdir(parents=True)
        png = rm.register_output(tile_dir / "case_0_0.png")
        png.write_bytes(b"png")

        assert rm.cleanup_outputs() is True
        assert not tile_dir.exists()
        assert (tmp_path / "dataset").exists()

    def test_cleanup_failure_reported(self, tmp_path):
        rm = ResourceManager()
        rm.register_output(tmp_path / "locked.tif")
        with patch("pathlib.Path.unlink", side_effect=PermissionError("locked")):
            assert rm.cleanup_outputs() is False

    def test_system_info(self):
        info = ResourceManager(max_threads=3, ram_limit="1GB").get_system_info()
        assert info["max_threads"] == 3
        assert info["ram_limit"] == 1024**3
        assert "ram_limit_percent" in info

    def test_check_without_manager_is_noop(self):
        ResourceManager().check_cancellation()
        ResourceManager().check()

    def test_memory_cap(self):
        rm = ResourceManager(ram_limit="1KB")
        with pytest.raises(ResourceLimitError):
            rm.check_memory()
        with pytest.raises(ResourceLimitError):
            rm.check()
        ResourceManager(ram_limit="1024GB").check_memory()

    def test_memory_read_failure_ignored(self):
        rm = ResourceManager(ram_limit="1KB")
        with patch.object(rm._process, "memory_info", side_effect=psutil.AccessDenied()):
            rm.check_memory()


class TestCancellationManager:
    """Tests for CancellationManager."""

    def setup_method(self):
        self.rm = ResourceManager()
        self.cm = CancellationManager(self.rm)
        self.rm.set_cancellation_manager(self.cm)

    def test_cancel_is_idempotent(self):
        assert self.cm.is_cancelled() is False
        assert self.cm.cancel() is True
        assert self.cm.cancel() is True
        assert self.cm.is_cancelled() is True

    def test_check_raises_after_cancel(self):
        self.rm.check_cancellation()
        self.cm.cancel()
        with pytest.raises(KeyboardInterrupt):
            self.rm.check_cancellation()

    def test_signal_handlers_installed_and_restored(self):
        original = signal.getsignal(signal.SIGTERM)
        self.cm.setup_signal_handlers()
        try:
            assert signal.getsignal(signal.SIGTERM) is not original
            signal.getsignal(signal.SIGTERM)(signal.SIGTERM, None)
            assert self.cm.is_cancelled()
        finally:
            self.cm.restore_signal_handlers()
        assert signal.getsignal(signal.SIGTERM) is original

    def test_handlers_skipped_off_main_thread(self):
        original = signal.getsignal(signal.SIGINT)
        thread = threading.Thread(target=self.cm.setup_signal_handlers)
        thread.start()
        thread.join()
        assert signal.getsignal(signal.SIGINT) is original
        assert self.cm._original_signal_handlers == {}


class TestManagedResources:
    """Tests for the managed_resources context manager."""

    def test_outputs_kept_on_success(self, tmp_path):
        out = tmp_path / "report.json"
        with managed_resources(max_threads=2) as rm:
            assert rm.cancellation is not None
            rm.register_output(out)
            out.write_text("{}")
        assert out.exists()

    def test_outputs_removed_on_error(self, tmp_path):
        out = tmp_path / "overlay.tif"
        with pytest.raises(RuntimeError):
            with managed_resources() as rm:
                rm.register_output(out)
                out.write_bytes(b"half")
                raise RuntimeError("backend down")
        assert not out.exists()

    def test_outputs_removed_on_cancellation(self, tmp_path):
        out = tmp_path / "predictions.csv"
        with pytest.raises(KeyboardInterrupt):
            with managed_resources() as rm:
                rm.register_output(out)
                out.write_text("slide_id\n")
                rm.cancellation.cancel()
                rm.check_cancellation()
        assert not out.exists()

    def test_signal_handlers_restored(self):
        original = signal.getsignal(signal.SIGINT)
        with managed_resources():
            assert signal.getsignal(signal.SIGINT) is not original
        assert signal.getsignal(signal.SIGINT) is original
