"""
Pytest configuration and shared fixtures for the gleason test suite.

Slides, annotations, lookup tables and models are generated on the fly so
the suite needs no data files.
"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest
import tifffile

from gleason.annotation import MODEL_CLASSES
from gleason.inference import PREDICTION_FIELDS


def gradient_image(width: int, height: int, seed: int = 0) -> np.ndarray:
    """Deterministic textured RGB raster: smooth gradients plus seeded noise."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:height, 0:width]
    image = np.stack(
        [
            (x * 255 // max(width - 1, 1)),
            (y * 255 // max(height - 1, 1)),
            ((x + y) % 256),
        ],
        axis=-1,
    ).astype(np.int16)
    image += rng.integers(-8, 9, size=image.shape, dtype=np.int16)
    return np.clip(image, 0, 255).astype(np.uint8)


def write_tiff(
    path: Path,
    pixels: np.ndarray,
    mpp: float | None = None,
    tile: tuple[int, int] | None = (256, 256),
    description: str | None = None,
) -> Path:
    """Write an RGB raster as a (tiled) single-level TIFF."""
    options = {"photometric": "rgb", "metadata": None}
    if tile is not None:
        options["tile"] = tile
    if mpp is not None:
        options["resolution"] = (1e4 / mpp, 1e4 / mpp)
        options["resolutionunit"] = 3
    if description is not None:
        options["description"] = description
    tifffile.imwrite(path, pixels, **options)
    return path


def feature(label: str, ring: list[tuple[float, float]]) -> dict:
    """GeoJSON polygon feature with a closed exterior ring."""
    closed = [list(p) for p in ring] + [list(ring[0])]
    return {
        "type": "Feature",
        "geometry": {"type": "Polygon", "coordinates": [closed]},
        "properties": {"classification": {"name": label}},
    }


def feature_collection(*features: dict) -> dict:
    return {"type": "FeatureCollection", "features": list(features)}


def square(x0: float, y0: float, x1: float, y1: float) -> list[tuple[float, float]]:
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def write_lookup_table(path: Path, rows: dict[tuple[str, int, int], list[float]]) -> Path:
    """Predictions-layout CSV usable as a lookup backend table."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=PREDICTION_FIELDS)
        writer.writeheader()
        for (slide_id, col, row), probs in rows.items():
            record = {"slide_id": slide_id, "col": col, "row": row, "label": ""}
            for cls, p in zip(MODEL_CLASSES, probs, strict=True):
                record[f"p_{cls.short}"] = repr(float(p))
            writer.writerow(record)
    return path


def one_hot(index: int, confidence: float = 0.9) -> list[float]:
    """A probability vector favoring ``index``."""
    rest = (1.0 - confidence) / 5
    return [confidence if i == index else rest for i in range(6)]


def build_onnx_model(
    path: Path,
    input_side: int,
    batch: int | str = "N",
    softmax: bool = False,
    n_out: int = 6,
):
    """
    Tiny classifier: global average pool over HxW, then a 3 x n_out linear layer.

    Output is logits, or probabilities when ``softmax`` is set.
    """
    onnx = pytest.importorskip("onnx")
    from onnx import TensorProto, helper, numpy_helper

    rng = np.random.default_rng(7)
    weight = rng.normal(size=(3, n_out)).astype(np.float32)
    bias = rng.normal(size=(n_out,)).astype(np.float32)

    nodes = [
        helper.make_node("GlobalAveragePool", ["input"], ["pooled"]),
        helper.make_node("Flatten", ["pooled"], ["flat"], axis=1),
        helper.make_node("Gemm", ["flat", "weight", "bias"], ["logits"]),
    ]
    output_name = "logits"
    if softmax:
        nodes.append(helper.make_node("Softmax", ["logits"], ["probs"], axis=1))
        output_name = "probs"

    graph = helper.make_graph(
        nodes,
        "tiny_gleason",
        [helper.make_tensor_value_info("input", TensorProto.FLOAT, [batch, 3, input_side, input_side])],
        [helper.make_tensor_value_info(output_name, TensorProto.FLOAT, [batch, n_out])],
        initializer=[
            numpy_helper.from_array(weight, "weight"),
            numpy_helper.from_array(bias, "bias"),
        ],
    )
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 13)])
    model.ir_version = 8
    onnx.checker.check_model(model)
    onnx.save(model, str(path))
    return path, weight, bias


@pytest.fixture
def slide_factory(tmp_path):
    """Write a gradient TIFF slide of the given size and return its path."""

    def make(name: str = "slide", width: int = 64, height: int = 48, mpp=0.25, seed=0):
        return write_tiff(tmp_path / f"{name}.tif", gradient_image(width, height, seed), mpp)

    return make


@pytest.fixture
def small_slide(slide_factory):
    """64x48 slide: a 4x3 grid of 16 px tiles."""
    return slide_factory("small", 64, 48)


@pytest.fixture
def dataset_dirs(tmp_path):
    """
    Two 64x64 slides with annotations, for prepare runs at tile size 16.

    ``alpha`` has a Gleason 3 square covering tiles (0..1, 0..1) and a
    Regular square covering (2..3, 2..3); ``beta`` has a Gleason 4 square over
    the top row and a Questionable square over the bottom row.
    """
    slides = tmp_path / "slides"
    annotations = tmp_path / "annotations"
    slides.mkdir()
    annotations.mkdir()
    write_tiff(slides / "alpha.tif", gradient_image(64, 64, 1), 0.25)
    write_tiff(slides / "beta.tif", gradient_image(64, 64, 2), 0.25)
    docs = {
        "alpha": feature_collection(
            feature("Gleason 3", square(0, 0, 32, 32)),
            feature("Regular", square(32, 32, 64, 64)),
        ),
        "beta": feature_collection(
            feature("Gleason 4", square(0, 0, 64, 16)),
            feature("Questionable", square(0, 48, 64, 64)),
        ),
    }
    for name, doc in docs.items():
        (annotations / f"{name}.geojson").write_text(json.dumps(doc), encoding="utf-8")
    return slides, annotations


def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line("markers", "unit: Unit test")
    config.addinivalue_line("markers", "integration: Integration test")
    config.addinivalue_line("markers", "slow: Slow test (> 5s)")
