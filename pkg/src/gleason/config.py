"""
Configuration models for the Gleason grading pipeline.

Defaults reproduce the reference grading setup: 1024 px tiles at 0.25 um/px,
224 px model input, a 62-15-23 split, sponge balanced to 4% and batch 28.
Colors, alpha and ImageNet statistics are local choices.
"""

import copy
import json
import logging
import tomllib
from pathlib import Path
from typing import Any, ClassVar, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .annotation import MODEL_CLASSES, GleasonClass
from .errors import ConfigError, GleasonError, InvalidBalanceSpecError, InvalidSplitSpecError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_COLORS: dict[str, tuple[int, int, int]] = {
    GleasonClass.REGULAR.short: (0, 170, 0),
    GleasonClass.GLEASON3.short: (255, 215, 0),
    GleasonClass.GLEASON4.short: (255, 140, 0),
    GleasonClass.GLEASON5.short: (220, 0, 0),
    GleasonClass.ARTEFACT_EMPTY.short: (200, 200, 200),
    GleasonClass.ARTEFACT_SPONGE.short: (130, 130, 130),
}


class SpecModel(BaseModel):
    """Base for configuration models; construction errors use ``error_class``."""

    error_class: ClassVar[type[GleasonError]] = ConfigError

    model_config = ConfigDict(validate_assignment=True, use_enum_values=True)

    def __init__(self, **data: Any):
        try:
            super().__init__(**data)
        except ValidationError as e:
            raise self.error_class(str(e)) from e


class ChannelStats(SpecModel):
    """Per-channel mean and standard deviation in RGB [0,1] or lαβ space."""

    mean: tuple[float, float, float] = Field(
        default=IMAGENET_MEAN, description="Per-channel mean"
    )
    std: tuple[float, float, float] = Field(
        default=IMAGENET_STD, description="Per-channel standard deviation"
    )
    space: Literal["rgb", "lab"] = Field(
        default="rgb", description="Color space the statistics refer to"
    )

    @field_validator("mean", "std")
    @classmethod
    def values_must_be_finite(cls, v):
        """Validate that statistics are finite numbers."""
        if not all(np.isfinite(v)):
            raise ValueError("Channel statistics must be finite")
        return v

    @field_validator("std")
    @classmethod
    def std_must_be_nonnegative(cls, v):
        """Validate that standard deviations are not negative."""
        if min(v) < 0:
            raise ValueError("Standard deviations must be >= 0")
        return v

    def is_degenerate(self, eps: float = 1e-6) -> bool:
        """True when any channel's std is <= eps."""
        return min(self.std) <= eps


class AugmentSpec(SpecModel):
    """Geometric transform plus saturation/hue jitter bounds."""

    flip_h: bool = Field(default=False, description="Mirror left-right")
    flip_v: bool = Field(default=False, description="Mirror top-bottom")
    rotation: int = Field(default=0, description="Counter-clockwise rotation in degrees")
    saturation_delta: float = Field(
        default=0.2, ge=0.0, le=1.0, description="Saturation shift bound s (HSV, [0,1])"
    )
    hue_delta: float = Field(
        default=10.0, ge=0.0, le=180.0, description="Hue shift bound h in degrees"
    )

    @field_validator("rotation")
    @classmethod
    def rotation_must_be_right_angle(cls, v):
        """Validate that rotation is a multiple of 90 degrees."""
        if v not in (0, 90, 180, 270):
            raise ValueError("rotation must be one of 0, 90, 180, 270")
        return v

    def sample(self, rng: np.random.Generator) -> "AugmentSpec":
        """Draw random flips and rotation, keeping this spec's jitter bounds."""
        return AugmentSpec(
            flip_h=bool(rng.integers(2)),
            flip_v=bool(rng.integers(2)),
            rotation=int(rng.integers(4)) * 90,
            saturation_delta=self.saturation_delta,
            hue_delta=self.hue_delta,
        )


class SplitSpec(SpecModel):
    """Stratified train/val/test ratios."""

    error_class: ClassVar[type[GleasonError]] = InvalidSplitSpecError

    ratios: tuple[float, float, float] = Field(
        default=(0.62, 0.15, 0.23), description="Train, validation, test fractions"
    )
    seed: int = Field(default=42, description="Shuffle seed")
    group_by_slide: bool = Field(
        default=False, description="Keep all tiles of a slide in one split"
    )

    @field_validator("ratios")
    @classmethod
    def ratios_must_sum_to_one(cls, v):
        """Validate that ratios are non-negative and sum to 1."""
        if min(v) < 0:
            raise ValueError("Split ratios must be >= 0")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"Split ratios must sum to 1, got {sum(v)}")
        return v

    @classmethod
    def nested(cls, test: float, val: float, **settings: Any) -> "SplitSpec":
        """Hold out ``test``, then give ``val`` of the remainder to validation."""
        rest = 1.0 - test
        return cls(ratios=(rest * (1.0 - val), rest * val, test), **settings)


class BalanceSpec(SpecModel):
    """Downsample one class to a target fraction within some splits."""

    error_class: ClassVar[type[GleasonError]] = InvalidBalanceSpecError

    target: GleasonClass = Field(
        default=GleasonClass.ARTEFACT_SPONGE, description="Class to downsample"
    )
    target_fraction: float = Field(
        default=0.04, description="Desired share of the target class, in (0, 1)"
    )
    applies_to: tuple[str, ...] = Field(
        default=("train", "val"), description="Splits the balance is applied to"
    )

    @field_validator("target", mode="before")
    @classmethod
    def target_from_name(cls, v):
        """Accept short class names such as ``"sponge"`` or ``"g3"``."""
        if isinstance(v, str) and not v.isdigit():
            return GleasonClass.from_short(v)
        return v

    @field_validator("target")
    @classmethod
    def target_must_be_model_class(cls, v):
        """Validate that the target is one of the six model classes."""
        if GleasonClass(v) not in MODEL_CLASSES:
            raise ValueError("Balance target must be a model class")
        return v

    @field_validator("target_fraction")
    @classmethod
    def fraction_must_be_open_unit(cls, v):
        """Validate that 0 < target_fraction < 1."""
        if not 0.0 < v < 1.0:
            raise ValueError(f"target_fraction must be in (0, 1), got {v}")
        return v

    @field_validator("applies_to")
    @classmethod
    def splits_must_be_known(cls, v):
        """Validate split names."""
        unknown = set(v) - set(SPLITS)
        if unknown:
            raise ValueError(f"Unknown splits {sorted(unknown)}; expected {SPLITS}")
        return v

    @property
    def target_class(self) -> GleasonClass:
        return GleasonClass(self.target)


class ColorMap(SpecModel):
    """Overlay colors per model class plus blending parameters."""

    colors: dict[str, tuple[int, int, int]] = Field(
        default_factory=lambda: dict(DEFAULT_COLORS),
        description="RGB color per class short name; missing classes use defaults",
    )
    alpha: float = Field(default=0.35, ge=0.0, le=1.0, description="Tint opacity")
    threshold: float = Field(
        default=0.0, ge=0.0, le=1.0, description="Minimum argmax probability to tint"
    )
    graded_alpha: bool = Field(
        default=False, description="Scale alpha by the argmax probability"
    )
    tint_artefacts: bool = Field(default=True, description="Tint artefact tiles")

    @field_validator("colors", mode="before")
    @classmethod
    def merge_with_defaults(cls, v):
        """Fill classes missing from an override map with the default colors."""
        merged = dict(DEFAULT_COLORS)
        for key, color in dict(v).items():
            merged[GleasonClass.from_short(str(key)).short] = color
        return merged

    @field_validator("colors")
    @classmethod
    def colors_must_be_rgb8(cls, v):
        """Validate that all six classes map to 8-bit RGB colors."""
        expected = {cls_.short for cls_ in MODEL_CLASSES}
        if set(v) != expected:
            raise ValueError(f"Color map must cover exactly {sorted(expected)}")
        for key, color in v.items():
            if any(not 0 <= c <= 255 for c in color):
                raise ValueError(f"Color for {key} must be 8-bit RGB, got {color}")
        return v

    def color_for(self, label: GleasonClass) -> tuple[int, int, int]:
        return tuple(self.colors[GleasonClass(label).short])


class BackendSpec(SpecModel):
    """Classifier backend selection and its transport settings."""

    kind: Literal["lookup", "model_file", "remote"] = Field(
        default="lookup", description="Backend implementation"
    )
    locator: str = Field(default="", description="Table path, model path or URL")
    batch_size: int = Field(default=28, ge=1, description="Tiles per classify call")
    model_id: str = Field(default="gleason", description="Model id sent to remote")
    retries: int = Field(default=2, ge=0, description="Remote retries on transport errors")
    backoff: float = Field(default=0.5, ge=0.0, description="Initial retry delay (s)")
    timeout: float = Field(default=30.0, gt=0.0, description="Remote request timeout (s)")
    max_in_flight: int = Field(
        default=4, ge=1, description="Concurrent remote requests"
    )

    _PREFIXES: ClassVar[dict[str, str]] = {
        "lookup": "lookup",
        "model": "model_file",
        "model_file": "model_file",
        "remote": "remote",
    }

    @classmethod
    def parse(cls, text: str, **settings: Any) -> "BackendSpec":
        """Parse ``lookup:FILE``, ``model:FILE`` or ``remote:URL``."""
        prefix, sep, locator = text.partition(":")
        if not sep or prefix not in cls._PREFIXES or not locator:
            raise ConfigError(
                f"Backend must be lookup:FILE, model:FILE or remote:URL, got {text!r}"
            )
        return cls(kind=cls._PREFIXES[prefix], locator=locator, **settings)


class PipelineConfig(SpecModel):
    """Main configuration for all workflows."""

    tile_size_px: int = Field(default=1024, ge=1, description="Grid tile side (px)")
    input_side: int = Field(default=224, ge=1, description="Model input side (px)")
    tissue_threshold: float = Field(
        default=0.5, ge=0.0, lt=1.0, description="Coverage a tissue class must exceed"
    )
    artefact_threshold: float = Field(
        default=0.9, ge=0.0, lt=1.0, description="Coverage an artefact class must exceed"
    )

    backend: BackendSpec = Field(
        default_factory=BackendSpec, description="Classifier backend"
    )
    color_map: ColorMap = Field(default_factory=ColorMap, description="Overlay colors")
    split: SplitSpec = Field(default_factory=SplitSpec, description="Split ratios")
    balance: list[BalanceSpec] = Field(
        default_factory=lambda: [BalanceSpec()], description="Per-split balancing"
    )
    augment: AugmentSpec = Field(
        default_factory=AugmentSpec, description="Training augmentation bounds"
    )

    normalization: ChannelStats = Field(
        default_factory=ChannelStats, description="Z-score statistics (RGB, [0,1])"
    )
    stain_target: Path | None = Field(
        default=None, description="ChannelStats JSON with the Reinhard target"
    )
    stain_before_resize: bool = Field(
        default=False, description="Normalize stains on the full tile before resizing"
    )

    artefact_mode: Literal["exclude", "benign"] = Field(
        default="exclude", description="Artefact handling in the cancer task"
    )
    fine_scope: Literal["malignant", "all"] = Field(
        default="malignant", description="Tiles included in the fine task"
    )

    workers: int = Field(default=1, ge=1, description="Worker threads")
    queue_depth: int = Field(default=2, ge=1, description="In-flight batches per worker")
    ram_limit: str | None = Field(
        default=None, description="Resident memory cap (e.g. '8GB'); exceeding it aborts"
    )

    @field_validator("normalization")
    @classmethod
    def normalization_must_be_rgb(cls, v):
        """Validate that z-score statistics are non-degenerate RGB stats."""
        if v.space != "rgb":
            raise ValueError("Normalization statistics must be in RGB space")
        if min(v.std) <= 0:
            raise ValueError("Normalization std must be > 0")
        return v


def load_config_file(path: Path | str) -> dict[str, Any]:
    """
    Load a TOML or JSON configuration document.

    Raises:
        ConfigError: File is missing, unparsable or not a table
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as f:
                values = tomllib.load(f)
        elif path.suffix.lower() == ".json":
            with open(path, encoding="utf-8") as f:
                values = json.load(f)
        else:
            raise ConfigError(f"Config file must be .toml or .json: {path}")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return values


def _set_dotted(values: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = values
    for part in parts[:-1]:
        child = node.get(part)
        if isinstance(child, BaseModel):
            child = child.model_dump()
        if not isinstance(child, dict):
            child = {}
        node[part] = child
        node = child
    node[parts[-1]] = value


def resolve_config(
    file_values: dict[str, Any] | None = None,
    cli_overrides: dict[str, Any] | None = None,
) -> PipelineConfig:
    """
    Merge configuration sources: command-line flag > config file > default.

    Args:
        file_values: Values from :func:`load_config_file`
        cli_overrides: Flag values keyed by dotted path (``"color_map.alpha"``);
            ``None`` means the flag was not given

    Returns:
        Validated PipelineConfig

    Raises:
        ConfigError: Merged values fail validation
    """
    merged = copy.deepcopy(file_values or {})
    for key, value in (cli_overrides or {}).items():
        if value is not None:
            _set_dotted(merged, key, value)
    try:
        return PipelineConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    except GleasonError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
