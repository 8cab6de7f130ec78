"""
    batseg.config
    ~~~~~~~~~~~~~

    Validated configuration models and plain-text ``key=value`` config files.

    Every model is frozen, so a configuration can be shared between threads
    and used as a dictionary key.
"""

from __future__ import annotations

from os import PathLike
from typing import Iterable, Literal, Mapping

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing_extensions import Self

Contrast = Literal["low", "medium", "high"]
Variant = Literal["bat", "transformer", "cnn"]


def parse_key_values(file: Iterable[str], /) -> dict[str, str]:
    """Parse ``key=value`` lines, skipping blanks and ``#`` comments."""
    values = {}
    for number, line in enumerate(file, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        k, sep, v = line.partition("=")
        if not sep or not k.strip():
            raise ValueError(f"line {number}: expected key=value, got {line!r}")
        values[k.strip()] = v.strip()
    return values


def read_key_values(path: str | PathLike) -> dict[str, str]:
    with open(path) as f:
        return parse_key_values(f)


class _Config(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    @classmethod
    def from_values(cls, values: Mapping[str, object], /, **overrides) -> Self:
        """Build from a mapping holding keys for several models.

        Only the keys declared by this model are taken. Explicit overrides
        that are not None win over the mapping.
        """
        kwargs = {k: v for k, v in values.items() if k in cls.model_fields}
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    @classmethod
    def from_file(cls, file: str | PathLike | Iterable[str], /, **overrides) -> Self:
        if isinstance(file, (str, PathLike)):
            values = read_key_values(file)
        else:
            values = parse_key_values(file)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_lines(self) -> list[str]:
        out = []
        for k, v in self.model_dump().items():
            if v is None:
                continue
            if isinstance(v, (tuple, list)):
                v = ",".join(map(str, v))
            out.append(f"{k}={v}")
        return out


def _split_commas(value):
    if isinstance(value, str):
        return tuple(int(x) for x in value.split(",") if x.strip())
    return value


class GeneratorConfig(_Config):
    """Key-patch generator settings: disc radius, NMS window and patch side."""

    radius: int = Field(10, ge=1)
    nms_neighbors: int = Field(30, ge=1)
    patch_side: int = Field(16, ge=1)


class ModelConfig(_Config):
    image_side: int = Field(64, gt=0)
    patch_side: int = Field(16, ge=16, le=16)
    channels: int = Field(32, ge=1)
    layers: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    mlp_hidden: int | None = Field(None, ge=1)
    head_channels: int | None = Field(None, ge=1)
    stem_channels: tuple[int, int, int] = (8, 16, 32)
    dilation_rates: tuple[int, ...] = (1, 3, 6)
    variant: Variant = "bat"
    residual: bool = True
    init_std: float = Field(0.02, gt=0)

    @field_validator("stem_channels", "dilation_rates", mode="before")
    @classmethod
    def split_commas(cls, value):
        return _split_commas(value)

    @model_validator(mode="after")
    def check_shapes(self) -> Self:
        if self.image_side % self.patch_side:
            raise ValueError(
                f"image_side {self.image_side} is not a multiple of {self.patch_side}"
            )
        if self.channels % self.heads:
            raise ValueError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )
        return self

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def sequence_length(self) -> int:
        return self.grid_side**2

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 2 * self.channels

    @property
    def branch_channels(self) -> int:
        return self.head_channels or self.channels

    @property
    def boundary_gates(self) -> bool:
        return self.variant == "bat"

    @property
    def map_count(self) -> int:
        """Number of supervised attention maps (n+1 with gates, else 0)."""
        return self.layers + 1 if self.boundary_gates else 0


class TrainConfig(_Config):
    lr: float = Field(1e-3, gt=0)
    batch: int = Field(4, ge=1)
    max_epochs: int = Field(200, ge=0)
    plateau_patience: int = Field(10, ge=1)
    lr_decay: float = Field(0.5, gt=0, lt=1)
    seed: int = Field(0, ge=0)
    augment: bool = False
    map_weight: float = Field(1.0, ge=0)


class SyntheticSpec(_Config):
    """Parameters of a synthetic lesion dataset."""

    seed: int = Field(0, ge=0)
    count: int = Field(1, ge=1)
    image_side: int = Field(64, gt=0)
    contrast: Contrast = "medium"
    hair_density: int = Field(0, ge=0)
    boundary_roughness: float = Field(0.0, ge=0)
    # multiplies the range of lesion semi-axes
    lesion_scale: float = Field(1.0, gt=0, le=2)

    @field_validator("image_side")
    @classmethod
    def multiple_of_16(cls, v: int) -> int:
        if v % 16:
            raise ValueError(f"image_side {v} is not a multiple of 16")
        return v
