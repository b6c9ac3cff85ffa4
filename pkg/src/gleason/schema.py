"""
JSON Schema validation for pipeline documents and CSV structure checks.

Schemas ship inside the package (``gleason/schemas``): ``metrics-report``
for evaluation reports and ``channel-stats`` for stain targets.
"""

import csv
import json
import logging
from importlib import resources
from pathlib import Path
from typing import Any

try:
    import jsonschema
    from jsonschema import ValidationError, validate
except ImportError:
    jsonschema = None
    ValidationError = Exception

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "metrics-report"
CHANNEL_STATS_SCHEMA = "channel-stats"

CLASS_SUFFIXES = ["regular", "g3", "g4", "g5", "art_empty", "art_sponge"]

# Required columns and how each value must parse.
CSV_LAYOUTS: dict[str, dict[str, type]] = {
    "manifest": {
        "slide_id": str,
        "col": int,
        "row": int,
        "label": str,
        "split": str,
        **{f"cov_{suffix}": float for suffix in CLASS_SUFFIXES},
        "path": str,
    },
    "predictions": {
        "slide_id": str,
        "col": int,
        "row": int,
        **{f"p_{suffix}": float for suffix in CLASS_SUFFIXES},
        "label": str,
    },
}


def load_schema(name: str) -> dict[str, Any]:
    """Load a packaged schema by name (without the ``.json`` suffix)."""
    schema_file = resources.files("gleason") / "schemas" / f"{name}.json"
    if not schema_file.is_file():
        raise FileNotFoundError(f"Schema not found: {name}")
    return json.loads(schema_file.read_text(encoding="utf-8"))


class JSONSchemaValidator:
    """JSON schema validator for one packaged document type."""

    def __init__(self, schema_name: str = REPORT_SCHEMA, schema_path: Path | None = None):
        """Initialize validator from a packaged schema or an explicit file."""
        if schema_path is not None:
            with open(schema_path, encoding="utf-8") as f:
                self.schema = json.load(f)
        else:
            self.schema = load_schema(schema_name)
        self.schema_name = schema_name

    def validate_document(self, document: dict[str, Any]) -> bool:
        """
        Validate a document against the schema.

        Returns:
            True if valid

        Raises:
            ValidationError: If validation fails and jsonschema is available
        """
        if jsonschema is None:
            logger.warning("jsonschema not available, skipping validation")
            return True

        try:
            validate(instance=document, schema=self.schema)
            logger.debug(f"{self.schema_name} validation successful")
            return True
        except ValidationError as e:
            logger.error(f"{self.schema_name} validation failed: {e.message}")
            raise

    def validate_file(self, file_path: Path) -> bool:
        """Validate a JSON file; returns False instead of raising."""
        if not file_path.exists():
            logger.error(f"File not found: {file_path}")
            return False

        try:
            with open(file_path, encoding="utf-8") as f:
                document = json.load(f)
            return self.validate_document(document)
        except json.JSONDecodeError as e:
            logger.error(f"Invalid JSON file {file_path}: {e}")
            return False
        except ValidationError as e:
            logger.error(f"Schema validation failed for {file_path}: {e}")
            return False

    def get_validation_errors(self, document: dict[str, Any]) -> list[str]:
        """All validation error messages, empty when the document is valid."""
        if jsonschema is None:
            return ["jsonschema not available"]

        validator_class = jsonschema.validators.validator_for(self.schema)
        validator = validator_class(self.schema)
        return [
            f"{'/'.join(str(p) for p in error.absolute_path) or '<root>'}: {error.message}"
            for error in validator.iter_errors(document)
        ]


def validate_csv_structure(csv_path: Path, layout: str) -> bool:
    """
    Check a manifest or predictions CSV for required columns and typed values.

    Args:
        csv_path: CSV file
        layout: ``"manifest"`` or ``"predictions"``

    Returns:
        True if the header and every row are well-formed
    """
    if not csv_path.exists():
        logger.error(f"CSV file not found: {csv_path}")
        return False

    columns = CSV_LAYOUTS[layout]
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if not reader.fieldnames:
            logger.error(f"CSV file has no headers: {csv_path}")
            return False

        missing_fields = set(columns) - set(reader.fieldnames)
        if missing_fields:
            logger.error(f"CSV missing required fields: {sorted(missing_fields)}")
            return False

        count = 0
        for i, row in enumerate(reader):
            try:
                for name, kind in columns.items():
                    value = kind(row[name])
                    if kind is float and not 0.0 <= value <= 1.0:
                        raise ValueError(f"{name}={value} outside [0, 1]")
            except (ValueError, TypeError, KeyError) as e:
                logger.error(f"CSV row {i + 1} validation error: {e}")
                return False
            count += 1

    logger.debug(f"{layout} CSV validation successful: {count} rows")
    return True
