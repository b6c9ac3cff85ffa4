"""
Tile preprocessing: resize, Reinhard stain normalization, z-score, augmentation.

Reinhard normalization matches per-channel mean and standard deviation in
the lαβ color space (RGB -> LMS -> log10 -> decorrelated lαβ).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .config import AugmentSpec, ChannelStats, PipelineConfig
from .errors import ConfigError, DegenerateStatsError, InvalidTileError
from .schema import CHANNEL_STATS_SCHEMA, JSONSchemaValidator, ValidationError
from .wsi import Coord, Tile

logger = logging.getLogger(__name__)

STATS_EPS = 1e-6
LMS_FLOOR = 1e-6

RGB_TO_LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
LMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [
        [1.0, 1.0, 1.0],
        [1.0, 1.0, -2.0],
        [1.0, -1.0, 0.0],
    ]
)
# Exact inverses keep normalize(image, lab_stats(image)) a fixed point.
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
LAB_TO_LMS = np.linalg.inv(LMS_TO_LAB)


@dataclass
class TileTensor:
    """Model input: HWC float32 values plus the tile it came from."""

    values: np.ndarray
    slide_id: str | None = None
    coord: Coord | None = None


def _as_image(image: np.ndarray | Tile) -> np.ndarray:
    pixels = image.pixels if isinstance(image, Tile) else np.asarray(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.size == 0:
        raise InvalidTileError(f"Expected a non-empty HxWx3 image, got {pixels.shape}")
    return pixels


def resize_tile(tile: np.ndarray | Tile, side: int = 224) -> np.ndarray:
    """Bilinear resize of the whole tile buffer (padding included) to side x side."""
    if side < 1:
        raise InvalidTileError(f"Resize side must be >= 1, got {side}")
    pixels = _as_image(tile)
    if pixels.shape[:2] == (side, side):
        return pixels.copy()
    return cv2.resize(pixels, (side, side), interpolation=cv2.INTER_LINEAR)


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """RGB on the 0..255 scale to lαβ, as float64."""
    rgb = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    lms = np.maximum(rgb @ RGB_TO_LMS.T, LMS_FLOOR)
    lab = np.log10(lms) @ LMS_TO_LAB.T
    return lab.reshape(np.shape(image))


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """lαβ back to unclamped float64 RGB on the 0..255 scale."""
    flat = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
    lms = np.power(10.0, flat @ LAB_TO_LMS.T)
    return (lms @ LMS_TO_RGB.T).reshape(np.shape(lab))


def lab_stats(image: np.ndarray | Tile) -> ChannelStats:
    """Per-channel lαβ mean and population standard deviation."""
    lab = rgb_to_lab(_as_image(image)).reshape(-1, 3)
    return ChannelStats(
        mean=tuple(float(v) for v in lab.mean(axis=0)),
        std=tuple(float(v) for v in lab.std(axis=0)),
        space="lab",
    )


def reinhard_normalize(
    image: np.ndarray | Tile,
    target: ChannelStats,
    clip: bool = True,
) -> np.ndarray:
    """
    Map an image's lαβ statistics onto ``target``.

    Each lαβ channel becomes ``(x - mu_src) * (sigma_tgt / sigma_src) + mu_tgt``;
    a source channel with ``sigma_src <= 1e-6`` is only shifted.

    Args:
        image: RGB image (uint8 or 0..255 float)
        target: lαβ statistics to attain
        clip: Return clamped uint8 when True, raw float64 RGB when False

    Returns:
        Normalized image

    Raises:
        DegenerateStatsError: Target has a std <= 1e-6
    """
    if target.space != "lab":
        raise ConfigError(f"Reinhard target must be lαβ statistics, got {target.space}")
    if target.is_degenerate(STATS_EPS):
        raise DegenerateStatsError(f"Reinhard target std {target.std} is degenerate")

    pixels = _as_image(image)
    lab = rgb_to_lab(pixels)
    flat = lab.reshape(-1, 3)
    src_mean = flat.mean(axis=0)
    src_std = flat.std(axis=0)

    scale = np.where(
        src_std > STATS_EPS, np.asarray(target.std) / np.maximum(src_std, STATS_EPS), 1.0
    )
    normalized = (lab - src_mean) * scale + np.asarray(target.mean)
    rgb = lab_to_rgb(normalized)
    if not clip:
        return rgb
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def fit_stain_target(reference: np.ndarray | Tile) -> ChannelStats:
    """Reinhard target statistics of a reference image."""
    stats = lab_stats(reference)
    if stats.is_degenerate(STATS_EPS):
        raise DegenerateStatsError(
            f"Reference image has degenerate lαβ std {stats.std}; pick a textured tile"
        )
    return stats


def save_channel_stats(stats: ChannelStats, path: Path | str) -> None:
    document = {"mean": list(stats.mean), "std": list(stats.std), "space": stats.space}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
        f.write("\n")


def load_channel_stats(path: Path | str) -> ChannelStats:
    """Read a ChannelStats JSON document, validated against its schema."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Channel statistics file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            document = json.load(f)
        JSONSchemaValidator(CHANNEL_STATS_SCHEMA).validate_document(document)
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"Invalid channel statistics {path}: {e}") from e
    return ChannelStats(**document)


def zscore(image: np.ndarray, stats: ChannelStats | None = None) -> TileTensor:
    """
    Per-channel standardization ``(p - mean) / std`` of an RGB image.

    Integer images are scaled to [0, 1] first; float images are assumed to be
    in [0, 1] already. Defaults to the ImageNet statistics.
    """
    stats = stats or ChannelStats()
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        raise DegenerateStatsError(f"Z-score std must be > 0, got {stats.std}")
    pixels = _as_image(image)
    if np.issubdtype(pixels.dtype, np.integer):
        scaled = pixels.astype(np.float64) / 255.0
    else:
        scaled = pixels.astype(np.float64)
    values = (scaled - np.asarray(stats.mean)) / std
    return TileTensor(values=values.astype(np.float32))


def _shift_hsv(image: np.ndarray, saturation: float, hue: float) -> np.ndarray:
    hsv = cv2.cvtColor(image.astype(np.float32) / 255.0, cv2.COLOR_RGB2HSV)
    hsv[..., 0] = np.mod(hsv[..., 0] + hue, 360.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + saturation, 0.0, 1.0)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB) * 255.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def augment(tile: np.ndarray | Tile, spec: AugmentSpec, rng_seed: int) -> np.ndarray:
    """
    Flip, rotate by a multiple of 90 degrees, then jitter saturation and hue.

    Shifts are drawn uniformly from ``[-saturation_delta, saturation_delta]``
    and ``[-hue_delta, hue_delta]`` degrees with a generator seeded by
    ``rng_seed``. Zero bounds leave colors untouched.
    """
    image = _as_image(tile)
    if spec.flip_h:
        image = image[:, ::-1]
    if spec.flip_v:
        image = image[::-1]
    if spec.rotation:
        image = np.rot90(image, k=spec.rotation // 90)
    image = np.ascontiguousarray(image)

    rng = np.random.default_rng(rng_seed)
    saturation = rng.uniform(-spec.saturation_delta, spec.saturation_delta)
    hue = rng.uniform(-spec.hue_delta, spec.hue_delta)
    if saturation == 0.0 and hue == 0.0:
        return image
    return _shift_hsv(image, saturation, hue)


class TilePreprocessor:
    """Inference chain: resize -> Reinhard (when configured) -> z-score."""

    def __init__(self, config: PipelineConfig, stain_target: ChannelStats | None = None):
        """Initialize from configuration; loads the stain target file if set."""
        self.config = config
        if stain_target is None and config.stain_target is not None:
            stain_target = load_channel_stats(config.stain_target)
        self.stain_target = stain_target
        if self.stain_target is None:
            logger.info("No stain target configured; skipping Reinhard normalization")

    def _normalize_stain(self, image: np.ndarray) -> np.ndarray:
        if self.stain_target is None:
            return image
        return reinhard_normalize(image, self.stain_target)

    def prepare_image(self, tile: np.ndarray | Tile) -> np.ndarray:
        """Resized (and stain-normalized) uint8 RGB image."""
        image = _as_image(tile)
        if self.config.stain_before_resize:
            return resize_tile(self._normalize_stain(image), self.config.input_side)
        return self._normalize_stain(resize_tile(image, self.config.input_side))

    def __call__(self, tile: np.ndarray | Tile, slide_id: str | None = None) -> TileTensor:
        tensor = zscore(self.prepare_image(tile), self.config.normalization)
        tensor.slide_id = slide_id
        tensor.coord = tile.coord if isinstance(tile, Tile) else None
        return tensor


class TrainingTransform:
    """On-the-fly augmentation followed by the inference chain."""

    def __init__(self, config: PipelineConfig, seed: int = 0, stain_target=None):
        self.config = config
        self.seed = seed
        self.preprocessor = TilePreprocessor(config, stain_target)

    def __call__(self, tile: np.ndarray | Tile, index: int) -> TileTensor:
        """Augment sample ``index`` deterministically and preprocess it."""
        rng = np.random.default_rng([self.seed, index])
        spec = self.config.augment.sample(rng)
        image = augment(tile, spec, int(rng.integers(2**31)))
        tensor = self.preprocessor(image)
        tensor.coord = tile.coord if isinstance(tile, Tile) else None
        return tensor
