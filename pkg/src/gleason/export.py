"""
Evaluation report export.
"""

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from .metrics import MetricsReport
from .schema import REPORT_SCHEMA, JSONSchemaValidator

logger = logging.getLogger(__name__)

REPORT_VERSION = "1.0.0"


def _to_native(data: Any) -> Any:
    """Recursively convert numpy scalars and arrays to JSON-native types."""
    if isinstance(data, dict):
        return {k: _to_native(v) for k, v in data.items()}
    if isinstance(data, list | tuple):
        return [_to_native(item) for item in data]
    if isinstance(data, np.integer):
        return int(data)
    if isinstance(data, np.floating):
        return float(data)
    if isinstance(data, np.ndarray):
        return data.tolist()
    return data


def text_report_path(report_path: Path | str) -> Path:
    """The table written next to a JSON report: ``report.json`` -> ``report.txt``."""
    return Path(report_path).with_suffix(".txt")


class ReportExporter:
    """Writes a MetricsReport as JSON (full precision) plus a text table."""

    def __init__(self, report_path: Path | str, validate: bool = True):
        self.report_path = Path(report_path)
        self.text_path = text_report_path(self.report_path)
        self.validate = validate

    def export(
        self,
        report: MetricsReport,
        sources: dict[str, str] | None = None,
        metrics_data: dict[str, Any] | None = None,
    ) -> dict[str, Any]:
        """
        Write both report files.

        Args:
            report: Evaluation result
            sources: Input file paths recorded in the report metadata
            metrics_data: Optional run metrics to embed

        Returns:
            Dict with the written paths and tile count
        """
        document = report.to_dict()
        document["metadata"] = {
            "version": REPORT_VERSION,
            **(sources or {}),
        }
        if metrics_data:
            document["metrics"] = metrics_data
        document = _to_native(document)

        if self.validate:
            JSONSchemaValidator(REPORT_SCHEMA).validate_document(document)

        self.report_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.report_path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2, ensure_ascii=False)
            f.write("\n")
        with open(self.text_path, "w", encoding="utf-8") as f:
            f.write(report.to_text())

        logger.info(f"Report exported to {self.report_path} and {self.text_path}")
        return {
            "json_path": self.report_path,
            "text_path": self.text_path,
            "n_tiles": report.confusion.total,
        }
