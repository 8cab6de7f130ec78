"""
    batseg.data
    ~~~~~~~~~~~

    Synthetic dermoscopy-like samples: a star-convex lesion (an ellipse whose
    radius is modulated by a short Fourier series) over a skin tone, with
    per-pixel noise and optional dark hair arcs drawn over both regions.

    Every sample is a pure function of ``(spec.seed, index)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .config import SyntheticSpec
from .errors import ContractError, GenerationError
from .keypatch import boundary_pixels

logger = logging.getLogger(__name__)

MAX_RETRIES = 100
MIN_COVERAGE = 0.02
MAX_COVERAGE = 0.70
MIN_BOUNDARY = 4
HARMONICS = (2, 3, 4, 5)

# Darkening of the lesion relative to the skin, and edge blur (pixels).
_TONE_GAP = {"low": 0.12, "medium": 0.3, "high": 0.55}
_EDGE_BLUR = {"low": 1.5, "medium": 1.0, "high": 0.5}
_NOISE = 0.02


@dataclass(frozen=True)
class LesionShape:
    """Perturbed ellipse; angles in radians, lengths in pixels."""

    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float
    amplitudes: tuple[float, ...] = ()
    phases: tuple[float, ...] = ()

    def rasterize(self, side: int) -> NDArray[np.uint8]:
        """Pixels whose centre lies inside the (perturbed) ellipse."""
        rows, cols = np.mgrid[:side, :side].astype(np.float64)
        dy, dx = rows - self.center[0], cols - self.center[1]
        cos, sin = math.cos(self.angle), math.sin(self.angle)
        u = (dx * cos + dy * sin) / self.axes[0]
        v = (-dx * sin + dy * cos) / self.axes[1]
        rho2 = u * u + v * v

        phi = np.arctan2(v, u)
        perturbation = np.zeros_like(phi)
        for k, a, p in zip(HARMONICS, self.amplitudes, self.phases):
            perturbation += a * np.cos(k * phi + p)
        bound = (1 + np.maximum(perturbation, -0.8)) ** 2
        return (rho2 <= bound).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Sample:
    image: NDArray[np.float64]
    mask: NDArray[np.uint8]
    id: str
    shape: LesionShape | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape or self.image.shape[2:] != (3,):
            raise ContractError(
                f"sample {self.id}: image {self.image.shape} does not match "
                f"mask {self.mask.shape}"
            )

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


def sample_id(index: int) -> str:
    return f"lesion_{index:05d}"


def _draw_shape(rng: np.random.Generator, spec: SyntheticSpec) -> LesionShape:
    side = spec.image_side
    return LesionShape(
        center=tuple(rng.uniform(0.3 * side, 0.7 * side, size=2)),
        axes=tuple(
            spec.lesion_scale * rng.uniform(0.12 * side, 0.35 * side, size=2)
        ),
        angle=float(rng.uniform(0, math.pi)),
        amplitudes=tuple(
            spec.boundary_roughness * rng.uniform(0, 1, size=len(HARMONICS))
            / np.asarray(HARMONICS)
        ),
        phases=tuple(rng.uniform(0, 2 * math.pi, size=len(HARMONICS))),
    )


def acceptable(mask: NDArray) -> bool:
    coverage = float(np.mean(mask))
    return (
        MIN_COVERAGE <= coverage <= MAX_COVERAGE
        and int(boundary_pixels(mask).sum()) >= MIN_BOUNDARY
    )


def render(
    mask: NDArray,
    contrast: str,
    tone_rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> NDArray[np.float64]:
    """Skin and lesion tones blended along a blurred edge, plus noise."""
    skin = np.array([0.87, 0.68, 0.58]) + tone_rng.uniform(-0.05, 0.05, size=3)
    tint = np.array([0.9, 1.0, 1.0]) * tone_rng.uniform(0.8, 1.2, size=3)
    lesion = np.clip(skin - _TONE_GAP[contrast] * tint, 0, 1)

    alpha = ndimage.gaussian_filter(mask.astype(np.float64), _EDGE_BLUR[contrast])
    image = skin * (1 - alpha[..., None]) + lesion * alpha[..., None]
    return image + noise_rng.normal(0, _NOISE, size=image.shape)


def draw_hair(
    image: NDArray[np.float64], count: int, rng: np.random.Generator
) -> NDArray[np.float64]:
    """Draw `count` one-pixel dark circular arcs over `image` (copied).

    Every arc passes through a random point of the image.
    """
    image = image.copy()
    side = image.shape[0]
    for _ in range(count):
        py, px = rng.uniform(0, side - 1, size=2)
        radius = rng.uniform(0.5 * side, 1.5 * side)
        direction = rng.uniform(0, 2 * math.pi)
        span = rng.uniform(0.5, 1.5)
        tone = rng.uniform(0.05, 0.2)
        cy = py - radius * math.sin(direction)
        cx = px - radius * math.cos(direction)

        start = direction - span / 2
        t = np.linspace(start, start + span, math.ceil(2 * radius * span) + 1)
        rows = np.round(cy + radius * np.sin(t)).astype(int)
        cols = np.round(cx + radius * np.cos(t)).astype(int)
        inside = (rows >= 0) & (rows < side) & (cols >= 0) & (cols < side)
        image[rows[inside], cols[inside]] = tone
    return image


def quantize(image: NDArray) -> NDArray[np.float64]:
    """Round to 8-bit levels so that files round-trip exactly."""
    return np.round(np.clip(image, 0, 1) * 255) / 255


def generate_sample(spec: SyntheticSpec, index: int) -> Sample:
    if not 0 <= index < spec.count:
        raise IndexError(f"index {index} out of range for count {spec.count}")

    streams = np.random.SeedSequence([spec.seed, index]).spawn(4)
    shape_rng, tone_rng, noise_rng, hair_rng = map(np.random.default_rng, streams)

    for attempt in range(MAX_RETRIES):
        shape = _draw_shape(shape_rng, spec)
        mask = shape.rasterize(spec.image_side)
        if acceptable(mask):
            break
        logger.debug("sample %d: rejected attempt %d", index, attempt)
    else:
        raise GenerationError(
            f"sample {index}: no acceptable lesion after {MAX_RETRIES} attempts"
        )

    image = render(mask, spec.contrast, tone_rng, noise_rng)
    image = draw_hair(image, spec.hair_density, hair_rng)
    return Sample(quantize(image), mask, sample_id(index), shape)


def generate_dataset(spec: SyntheticSpec) -> list[Sample]:
    return [generate_sample(spec, i) for i in range(spec.count)]


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random vertical flip, horizontal flip and a scale change in
    [0.9, 1.1] about the image centre."""
    image, mask = sample.image, sample.mask
    if rng.random() < 0.5:
        image, mask = image[::-1], mask[::-1]
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]

    scale = rng.uniform(0.9, 1.1)
    center = (np.asarray(mask.shape) - 1) / 2
    matrix = np.full(2, 1 / scale)
    offset = center - center / scale
    image = np.stack(
        [
            ndimage.affine_transform(image[..., k], matrix, offset, order=1, mode="nearest")
            for k in range(image.shape[-1])
        ],
        axis=-1,
    )
    mask = ndimage.affine_transform(mask, matrix, offset, order=0, mode="nearest")
    return Sample(quantize(image), mask.astype(np.uint8), sample.id)


def split(
    samples: Sequence[Sample], val_fraction: float = 0.2, seed: int = 0
) -> tuple[list[Sample], list[Sample]]:
    """Deterministic shuffled (train, val) split; both parts are non-empty
    when there are at least two samples."""
    if not 0 < val_fraction < 1:
        raise ContractError(f"val_fraction must be in (0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = min(max(1, round(val_fraction * len(samples))), len(samples) - 1)
    return [samples[i] for i in order[n_val:]], [samples[i] for i in order[:n_val]]
