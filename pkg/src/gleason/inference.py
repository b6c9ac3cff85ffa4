"""
Pluggable 6-class tile classifiers and the predictions table format.

Three backends share one interface: a lookup table keyed by tile
coordinate, an ONNX model file run through onnxruntime, and a remote HTTP
service. Every backend returns raw per-tile rows that
:func:`classify_batch` validates and normalizes into ClassProbabilities.
"""

import base64
import csv
import logging
import math
import os
import threading
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np
import onnxruntime as ort
from scipy.special import softmax as _softmax

from .annotation import MODEL_CLASSES, GleasonClass
from .config import BackendSpec
from .errors import (
    BackendUnavailableError,
    NonNormalizableOutputError,
    RemoteHTTPError,
    RemoteProtocolError,
    RemoteTransportError,
    ShapeMismatchError,
    UnsupportedModelError,
)
from .preprocess import TileTensor
from .wsi import Coord

logger = logging.getLogger(__name__)

N_CLASSES = len(MODEL_CLASSES)
SUM_TOLERANCE = 1e-3
# Rows this close to 1 are passed through bit-for-bit.
EXACT_TOLERANCE = 1e-9

TOKEN_ENV = "GLEASON_REMOTE_TOKEN"
CLASSIFY_PATH = "/v1/classify"

PREDICTION_FIELDS = [
    "slide_id",
    "col",
    "row",
    *(f"p_{cls.short}" for cls in MODEL_CLASSES),
    "label",
]


@dataclass(frozen=True)
class ClassProbabilities:
    """Probability per model class, in class order."""

    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.probs) != N_CLASSES:
            raise ShapeMismatchError(
                f"Expected {N_CLASSES} probabilities, got {len(self.probs)}"
            )
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise NonNormalizableOutputError(f"Probabilities outside [0, 1]: {self.probs}")
        if abs(math.fsum(self.probs) - 1.0) > 1e-5:
            raise NonNormalizableOutputError(
                f"Probabilities sum to {math.fsum(self.probs)}, not 1"
            )

    @property
    def label(self) -> GleasonClass:
        return argmax_label(self.probs)

    @property
    def confidence(self) -> float:
        return max(self.probs)

    @classmethod
    def uniform(cls) -> "ClassProbabilities":
        return cls((1.0 / N_CLASSES,) * N_CLASSES)


@dataclass(frozen=True)
class Prediction:
    """Classifier output for one tile."""

    slide_id: str
    coord: Coord
    probs: ClassProbabilities

    @property
    def label(self) -> GleasonClass:
        return self.probs.label


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a logit array."""
    return _softmax(np.asarray(logits, dtype=np.float64), axis=-1)


def argmax_label(probs: Sequence[float]) -> GleasonClass:
    """Most probable class; ties go to the lowest class index."""
    return GleasonClass(int(np.argmax(np.asarray(probs, dtype=np.float64))))


def normalize_probabilities(row: Sequence[float]) -> ClassProbabilities:
    """
    Validate one backend output row.

    Rows summing to 1 within 1e-3 are rescaled to sum 1; anything else is
    rejected.

    Raises:
        ShapeMismatchError: Row does not have six entries
        NonNormalizableOutputError: Negative, non-finite, or off-sum row
    """
    values = np.asarray(row, dtype=np.float64).reshape(-1)
    if values.shape != (N_CLASSES,):
        raise ShapeMismatchError(f"Expected {N_CLASSES} outputs, got {values.shape[0]}")
    if not np.all(np.isfinite(values)) or np.any(values < 0.0):
        raise NonNormalizableOutputError(f"Output is not a probability vector: {values}")
    total = math.fsum(values)
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise NonNormalizableOutputError(
            f"Output sums to {total:.6f}, outside 1 +/- {SUM_TOLERANCE}"
        )
    if abs(total - 1.0) > EXACT_TOLERANCE:
        values = values / total
    return ClassProbabilities(tuple(float(v) for v in np.clip(values, 0.0, 1.0)))


class ClassifierBackend(Protocol):
    """Raw classifier: one row of six scores per tensor, same order."""

    shareable: bool

    def predict_raw(self, batch: Sequence[TileTensor]) -> list[Sequence[float]]: ...

    def close(self) -> None: ...


def classify_batch(
    backend: ClassifierBackend,
    batch: Sequence[TileTensor],
    batch_size: int | None = None,
    input_side: int = 224,
) -> list[ClassProbabilities]:
    """
    Classify a batch of preprocessed tiles.

    Args:
        backend: Backend instance from :func:`create_backend`
        batch: Tensors shaped input_side x input_side x 3
        batch_size: Upper bound on the batch length
        input_side: Expected tensor side

    Returns:
        One normalized probability vector per tensor, in batch order

    Raises:
        ShapeMismatchError: Batch is empty, too long, or a tensor has the wrong shape
        NonNormalizableOutputError: Backend output cannot be normalized
    """
    if not batch:
        raise ShapeMismatchError("Batch must contain at least one tile")
    if batch_size is not None and len(batch) > batch_size:
        raise ShapeMismatchError(f"Batch of {len(batch)} exceeds batch size {batch_size}")
    expected = (input_side, input_side, 3)
    for tensor in batch:
        if tensor.values.shape != expected:
            raise ShapeMismatchError(
                f"Tensor for {tensor.slide_id} {tensor.coord} has shape "
                f"{tensor.values.shape}, expected {expected}"
            )

    rows = backend.predict_raw(batch)
    if len(rows) != len(batch):
        raise ShapeMismatchError(f"Backend returned {len(rows)} rows for {len(batch)} tiles")
    return [normalize_probabilities(row) for row in rows]


class LookupBackend:
    """Fixed vectors keyed by (slide_id, col, row); unmapped tiles are uniform."""

    shareable = True

    def __init__(self, table: dict[tuple[str | None, int, int], Sequence[float]]):
        self.table = table

    @classmethod
    def from_csv(cls, path: Path | str) -> "LookupBackend":
        """Load a predictions-layout CSV; an empty slide_id matches any slide."""
        path = Path(path)
        if not path.is_file():
            raise BackendUnavailableError(f"Lookup table not found: {path}")
        table: dict[tuple[str | None, int, int], Sequence[float]] = {}
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            probability_fields = PREDICTION_FIELDS[3:-1]
            missing = {"col", "row", *probability_fields} - set(reader.fieldnames or [])
            if missing:
                raise BackendUnavailableError(
                    f"Lookup table {path} is missing columns {sorted(missing)}"
                )
            for row in reader:
                slide_id = row.get("slide_id") or None
                key = (slide_id, int(row["col"]), int(row["row"]))
                table[key] = tuple(float(row[name]) for name in probability_fields)
        logger.info(f"Loaded lookup table with {len(table)} entries from {path}")
        return cls(table)

    def predict_raw(self, batch: Sequence[TileTensor]) -> list[Sequence[float]]:
        uniform = ClassProbabilities.uniform().probs
        rows = []
        for tensor in batch:
            if tensor.coord is None:
                rows.append(uniform)
                continue
            col, row = tensor.coord
            vector = self.table.get((tensor.slide_id, col, row))
            if vector is None:
                vector = self.table.get((None, col, row), uniform)
            rows.append(vector)
        return rows

    def close(self) -> None:
        pass


class ModelFileBackend:
    """ONNX classifier with input N x 3 x side x side and output N x 6."""

    shareable = False

    def __init__(self, path: Path | str, input_side: int = 224):
        """
        Load and check an ONNX model.

        Raises:
            BackendUnavailableError: File missing or not a loadable model
            UnsupportedModelError: Operator set not supported by the runtime
            ShapeMismatchError: Input or output shape breaks the contract
        """
        self.path = Path(path)
        if not self.path.is_file():
            raise BackendUnavailableError(f"Model file not found: {self.path}")
        try:
            self.session = ort.InferenceSession(
                str(self.path), providers=["CPUExecutionProvider"]
            )
        except Exception as e:
            message = str(e)
            if any(word in message.lower() for word in ("opset", "not_implemented", "not implemented")):
                raise UnsupportedModelError(f"{self.path}: {message}") from e
            raise BackendUnavailableError(f"Cannot load model {self.path}: {message}") from e

        inputs = self.session.get_inputs()
        outputs = self.session.get_outputs()
        if len(inputs) != 1 or not outputs:
            raise ShapeMismatchError(
                f"{self.path}: expected one input and at least one output"
            )
        self.input_name = inputs[0].name
        input_shape = list(inputs[0].shape)
        if len(input_shape) != 4 or input_shape[1:] != [3, input_side, input_side]:
            raise ShapeMismatchError(
                f"{self.path}: input shape {input_shape}, expected [N, 3, {input_side}, "
                f"{input_side}]"
            )
        output_shape = list(outputs[0].shape)
        if len(output_shape) != 2 or (
            isinstance(output_shape[1], int) and output_shape[1] != N_CLASSES
        ):
            raise ShapeMismatchError(
                f"{self.path}: output shape {output_shape}, expected [N, {N_CLASSES}]"
            )
        self.fixed_batch = input_shape[0] if isinstance(input_shape[0], int) else None
        logger.info(
            f"Loaded model {self.path.name} (batch dimension "
            f"{self.fixed_batch or 'dynamic'})"
        )

    def _run(self, chunk: np.ndarray) -> np.ndarray:
        scores = np.asarray(self.session.run(None, {self.input_name: chunk})[0])
        if scores.shape != (chunk.shape[0], N_CLASSES):
            raise ShapeMismatchError(
                f"Model output shape {scores.shape}, expected ({chunk.shape[0]}, {N_CLASSES})"
            )
        return scores.astype(np.float64)

    def _run_fixed(self, chunk: np.ndarray) -> np.ndarray:
        # zero-pad a short chunk up to the declared batch, then drop the padding rows
        short = self.fixed_batch - chunk.shape[0]
        if short:
            chunk = np.pad(chunk, ((0, short), (0, 0), (0, 0), (0, 0)))
        return self._run(chunk)[: self.fixed_batch - short]

    def predict_raw(self, batch: Sequence[TileTensor]) -> list[Sequence[float]]:
        # HWC -> NCHW
        stacked = np.stack([t.values for t in batch]).astype(np.float32)
        nchw = np.ascontiguousarray(stacked.transpose(0, 3, 1, 2))
        if self.fixed_batch is None:
            scores = self._run(nchw)
        else:
            scores = np.concatenate(
                [self._run_fixed(nchw[i : i + self.fixed_batch])
                 for i in range(0, nchw.shape[0], self.fixed_batch)]
            )

        rows = []
        for row in scores:
            is_probability = (
                np.all(row >= 0.0)
                and np.all(row <= 1.0)
                and abs(row.sum() - 1.0) <= SUM_TOLERANCE
            )
            rows.append(row if is_probability else softmax(row))
        return rows

    def close(self) -> None:
        pass


def load_model_backend(path: Path | str, input_side: int = 224) -> ModelFileBackend:
    """Load an ONNX model file as a backend; logits are softmaxed internally."""
    return ModelFileBackend(path, input_side)


class RemoteBackend:
    """HTTP client for the ``/v1/classify`` protocol with retry and backoff."""

    shareable = True

    def __init__(
        self,
        spec: BackendSpec,
        token: str | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.spec = spec
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.client = httpx.Client(
            base_url=spec.locator,
            headers=headers,
            timeout=spec.timeout,
            transport=transport,
        )
        self._in_flight = threading.BoundedSemaphore(spec.max_in_flight)

    def _payload(self, batch: Sequence[TileTensor]) -> dict:
        tiles = []
        for index, tensor in enumerate(batch):
            height, width = tensor.values.shape[:2]
            pixels = np.ascontiguousarray(tensor.values, dtype="<f4").tobytes()
            tiles.append(
                {
                    "id": str(index),
                    "width": int(width),
                    "height": int(height),
                    "pixels_b64": base64.b64encode(pixels).decode("ascii"),
                }
            )
        return {"model_id": self.spec.model_id, "tiles": tiles}

    def _post(self, payload: dict) -> httpx.Response:
        attempts = self.spec.retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            try:
                with self._in_flight:
                    return self.client.post(CLASSIFY_PATH, json=payload)
            except httpx.TransportError as e:
                last_error = e
                if attempt < attempts - 1:
                    delay = self.spec.backoff * 2**attempt
                    logger.warning(
                        f"Remote classifier unreachable ({e}); retry "
                        f"{attempt + 1}/{self.spec.retries} in {delay:.2f}s"
                    )
                    time.sleep(delay)
        raise RemoteTransportError(
            f"Remote classifier {self.spec.locator} unreachable after "
            f"{attempts} attempt(s): {last_error}"
        )

    def predict_raw(self, batch: Sequence[TileTensor]) -> list[Sequence[float]]:
        response = self._post(self._payload(batch))
        if response.status_code != 200:
            raise RemoteHTTPError(
                response.status_code,
                f"Remote classifier answered HTTP {response.status_code}: "
                f"{response.text[:200]}",
            )
        try:
            results = response.json()["results"]
        except (ValueError, KeyError, TypeError) as e:
            raise RemoteProtocolError(f"Malformed classifier response: {e}") from e
        if not isinstance(results, list) or len(results) != len(batch):
            count = len(results) if isinstance(results, list) else "no"
            raise RemoteProtocolError(
                f"Remote classifier returned {count} results for {len(batch)} tiles"
            )

        by_id: dict[str, list[float]] = {}
        for result in results:
            try:
                tile_id = str(result["id"])
                probs = [float(p) for p in result["probs"]]
            except (KeyError, TypeError, ValueError) as e:
                raise RemoteProtocolError(f"Malformed result entry {result!r}") from e
            if len(probs) != N_CLASSES or tile_id in by_id:
                raise RemoteProtocolError(f"Malformed or duplicate result for id {tile_id}")
            by_id[tile_id] = probs

        try:
            return [by_id[str(index)] for index in range(len(batch))]
        except KeyError as e:
            raise RemoteProtocolError(f"Result missing for tile id {e}") from e

    def close(self) -> None:
        self.client.close()


def remote_classify(
    endpoint: str,
    batch: Sequence[TileTensor],
    spec: BackendSpec | None = None,
    transport: httpx.BaseTransport | None = None,
) -> list[ClassProbabilities]:
    """One-shot remote classification of a batch."""
    spec = spec or BackendSpec(kind="remote", locator=endpoint)
    if spec.locator != endpoint:
        spec = spec.model_copy(update={"locator": endpoint})
    if not batch:
        raise ShapeMismatchError("Batch must contain at least one tile")
    backend = RemoteBackend(spec, os.environ.get(TOKEN_ENV), transport)
    try:
        return classify_batch(backend, batch, spec.batch_size, batch[0].values.shape[0])
    finally:
        backend.close()


def create_backend(
    spec: BackendSpec,
    input_side: int = 224,
    transport: httpx.BaseTransport | None = None,
) -> ClassifierBackend:
    """Build the backend a BackendSpec selects."""
    if spec.kind == "lookup":
        return LookupBackend.from_csv(spec.locator)
    if spec.kind == "model_file":
        return load_model_backend(spec.locator, input_side)
    if spec.kind == "remote":
        return RemoteBackend(spec, os.environ.get(TOKEN_ENV), transport)
    raise BackendUnavailableError(f"Unknown backend kind {spec.kind!r}")


class BackendPool:
    """One shared backend, or one per worker thread for non-shareable kinds."""

    def __init__(self, spec: BackendSpec, input_side: int = 224, transport=None):
        self.spec = spec
        self.input_side = input_side
        self.transport = transport
        self._lock = threading.Lock()
        self._local = threading.local()
        self._instances: list[ClassifierBackend] = []
        first = create_backend(spec, input_side, transport)
        self._instances.append(first)
        self._shared = first if first.shareable else None
        if self._shared is None:
            self._local.backend = first

    def get(self) -> ClassifierBackend:
        if self._shared is not None:
            return self._shared
        backend = getattr(self._local, "backend", None)
        if backend is None:
            backend = create_backend(self.spec, self.input_side, self.transport)
            self._local.backend = backend
            with self._lock:
                self._instances.append(backend)
        return backend

    def close(self) -> None:
        with self._lock:
            instances, self._instances = self._instances, []
        for backend in instances:
            backend.close()


class PredictionWriter:
    """Streams predictions into a CSV; floats are written at full precision."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(
            self._file, fieldnames=PREDICTION_FIELDS, lineterminator="\n"
        )
        self._writer.writeheader()
        self.count = 0

    def write(self, prediction: Prediction) -> None:
        row = {
            "slide_id": prediction.slide_id,
            "col": prediction.coord[0],
            "row": prediction.coord[1],
            "label": prediction.label.label,
        }
        for name, value in zip(PREDICTION_FIELDS[3:-1], prediction.probs.probs, strict=True):
            row[name] = repr(float(value))
        self._writer.writerow(row)
        self.count += 1

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "PredictionWriter":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


def write_predictions_csv(predictions: Iterable[Prediction], path: Path | str) -> Path:
    with PredictionWriter(path) as writer:
        for prediction in predictions:
            writer.write(prediction)
    return Path(path)


def read_predictions_csv(path: Path | str) -> list[Prediction]:
    """Read a predictions CSV; every row is re-validated."""
    predictions = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            probs = normalize_probabilities(
                [float(row[name]) for name in PREDICTION_FIELDS[3:-1]]
            )
            predictions.append(
                Prediction(row["slide_id"], (int(row["col"]), int(row["row"])), probs)
            )
    return predictions
