"""
    batseg.keypatch
    ~~~~~~~~~~~~~~~

    Ground-truth key-patch maps from binary lesion masks.

    Boundary pixels are traced into contours, each one is scored by how far
    the lesion share of a disc around it departs from one half, the scores
    are thinned by non-maximum suppression along the contour, and the
    surviving pixels mark their patches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cache
from itertools import groupby
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .config import GeneratorConfig
from .errors import ContractError

BinaryMask = NDArray[np.uint8]

# Moore neighbourhood, clockwise on screen (rows grow downwards), starting west.
_CLOCKWISE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_DIRECTION = {offset: k for k, offset in enumerate(_CLOCKWISE)}
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, kw_only=True)
class BoundaryPoint:
    """A boundary pixel, its place in its contour and, once scored,
    the lesion proportion of the disc centred on it."""

    row: int
    col: int
    contour: int = 0
    position: int = 0
    proportion: float | None = None

    @property
    def score(self) -> float:
        if self.proportion is None:
            raise ValueError(f"boundary point ({self.row}, {self.col}) is not scored")
        return abs(self.proportion - 0.5)


@dataclass(frozen=True, eq=False)
class KeyPatchMap:
    values: NDArray[np.uint8]
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        if self.values.shape != (self.grid_rows * self.grid_cols,):
            raise ContractError(
                f"key-patch map of {self.values.shape} values "
                f"for a {self.grid_rows}x{self.grid_cols} grid"
            )
        if not np.isin(self.values, (0, 1)).all():
            raise ContractError("key-patch map values must be exactly 0 or 1")

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other):
        if other.__class__ is not self.__class__:
            return NotImplemented
        return (self.grid_rows, self.grid_cols) == (
            other.grid_rows,
            other.grid_cols,
        ) and np.array_equal(self.values, other.values)

    def to_json(self) -> str:
        return json.dumps(
            {
                "grid_rows": self.grid_rows,
                "grid_cols": self.grid_cols,
                "values": self.values.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> KeyPatchMap:
        data = json.loads(text)
        values = np.asarray(data["values"])
        if not np.isin(values, (0, 1)).all():
            raise ContractError("key-patch map values must be exactly 0 or 1")
        return cls(
            values.astype(np.uint8),
            int(data["grid_rows"]),
            int(data["grid_cols"]),
        )


def check_mask(mask: NDArray, patch_side: int | None = None) -> NDArray[np.bool_]:
    """Validate a binary mask and return it as booleans."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or 0 in mask.shape:
        raise ContractError(f"expected a non-empty 2D mask, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ContractError("mask values must be exactly 0 or 1")
    if patch_side is not None and (
        mask.shape[0] % patch_side or mask.shape[1] % patch_side
    ):
        raise ContractError(
            f"mask shape {mask.shape} is not a multiple of patch side {patch_side}"
        )
    return mask.astype(bool)


def boundary_pixels(mask: NDArray) -> NDArray[np.bool_]:
    """Lesion pixels with at least one background 4-neighbour.

    Pixels outside the image count as background.
    """
    lesion = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(lesion, structure=_CROSS, border_value=0)
    return lesion & ~interior


def _is_lesion(lesion: NDArray[np.bool_], r: int, c: int) -> bool:
    return 0 <= r < lesion.shape[0] and 0 <= c < lesion.shape[1] and lesion[r, c]


def _start_backtrack(lesion: NDArray[np.bool_], r: int, c: int) -> int:
    for k in (0, 2, 4, 6):  # W, N, E, S
        dr, dc = _CLOCKWISE[k]
        if not _is_lesion(lesion, r + dr, c + dc):
            return k
    raise ValueError(f"({r}, {c}) is not a boundary pixel")


def _moore_trace(
    lesion: NDArray[np.bool_], start: tuple[int, int], backtrack: int
) -> list[tuple[int, int]]:
    """Walk the contour through `start` clockwise.

    `backtrack` is the direction (seen from `start`) of a background pixel.
    The walk stops as soon as a (pixel, backtrack) state repeats.
    """
    path = [start]
    p, d = start, backtrack
    seen = set()
    while (p, d) not in seen:
        seen.add((p, d))
        for k in range(1, 9):
            dr, dc = _CLOCKWISE[(d + k) % 8]
            q = (p[0] + dr, p[1] + dc)
            if _is_lesion(lesion, *q):
                break
        else:
            return path  # isolated pixel

        br, bc = _CLOCKWISE[(d + k - 1) % 8]
        d = _DIRECTION[(p[0] + br - q[0], p[1] + bc - q[1])]
        p = q
        path.append(p)
    return path


def trace_boundary(mask: NDArray) -> list[BoundaryPoint]:
    """Every boundary pixel, grouped in contours and ordered along them.

    Each contour starts at its topmost-then-leftmost pixel and runs
    clockwise; contours are ordered by their starting pixel in row-major
    order. An empty mask has no boundary.
    """
    lesion = check_mask(mask)
    edge = boundary_pixels(lesion)
    remaining = edge.copy()

    points: list[BoundaryPoint] = []
    contour = 0
    for r, c in zip(*map(np.ndarray.tolist, np.nonzero(edge))):
        if not remaining[r, c]:
            continue
        ordered = []
        for q in _moore_trace(lesion, (r, c), _start_backtrack(lesion, r, c)):
            if remaining[q]:
                remaining[q] = False
                ordered.append(q)
        points.extend(
            BoundaryPoint(row=qr, col=qc, contour=contour, position=i)
            for i, (qr, qc) in enumerate(ordered)
        )
        contour += 1
    return points


@cache
def disc_offsets(radius: int) -> NDArray[np.int64]:
    """Offsets (dr, dc) with dr² + dc² <= radius², as an (n, 2) array."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    r = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(r, r, indexing="ij")
    inside = dr**2 + dc**2 <= radius**2
    offsets = np.stack([dr[inside], dc[inside]], axis=1)
    offsets.setflags(write=False)
    return offsets


def _proportions(
    lesion: NDArray[np.bool_], rows: NDArray, cols: NDArray, radius: int
) -> NDArray[np.float64]:
    offsets = disc_offsets(radius)
    rr = np.asarray(rows)[:, None] + offsets[:, 0]
    cc = np.asarray(cols)[:, None] + offsets[:, 1]
    valid = (rr >= 0) & (rr < lesion.shape[0]) & (cc >= 0) & (cc < lesion.shape[1])
    hits = lesion[np.where(valid, rr, 0), np.where(valid, cc, 0)] & valid
    return hits.sum(axis=1) / valid.sum(axis=1)


def circle_proportion(mask: NDArray, row: int, col: int, radius: int) -> float:
    """Share of lesion pixels among the in-image pixels of the disc
    of `radius` centred on (row, col)."""
    lesion = check_mask(mask)
    if not (0 <= row < lesion.shape[0] and 0 <= col < lesion.shape[1]):
        raise ValueError(f"({row}, {col}) is outside a {lesion.shape} mask")
    return float(_proportions(lesion, [row], [col], radius)[0])


def score_boundary(
    points: Sequence[BoundaryPoint], mask: NDArray, cfg: GeneratorConfig
) -> list[BoundaryPoint]:
    if not points:
        return []
    lesion = check_mask(mask)
    rows = [p.row for p in points]
    cols = [p.col for p in points]
    proportions = _proportions(lesion, rows, cols, cfg.radius)
    return [replace(p, proportion=float(v)) for p, v in zip(points, proportions)]


def _window_maxima(scores: NDArray[np.float64], k: int) -> NDArray[np.bool_]:
    """Points of a closed contour whose score is not beaten within
    `k` positions on either side; among ties the earliest index wins."""
    n = len(scores)
    if 2 * k + 1 < n:
        peak = ndimage.maximum_filter1d(scores, size=2 * k + 1, mode="wrap")
    else:
        peak = np.full(n, scores.max())
    keep = scores >= peak

    idx = np.arange(n)
    for offset in range(1, min(k, n - 1) + 1):
        for j in ((idx - offset) % n, (idx + offset) % n):
            keep &= ~((scores[j] == scores) & (j < idx))
    return keep


def nms_filter(
    points: Sequence[BoundaryPoint], nms_neighbors: int
) -> list[BoundaryPoint]:
    """Keep the contour-window maxima of the ambiguity score."""
    if nms_neighbors < 1:
        raise ValueError(f"nms_neighbors must be >= 1, got {nms_neighbors}")
    retained = []
    for _, group in groupby(points, key=lambda p: p.contour):
        group = list(group)
        scores = np.array([p.score for p in group])
        keep = _window_maxima(scores, nms_neighbors)
        retained.extend(p for p, k in zip(group, keep) if k)
    return retained


def to_patch_index(row: int, col: int, patch_side: int, grid_cols: int) -> int:
    """Row-major index of the patch holding pixel (row, col)."""
    return (row // patch_side) * grid_cols + col // patch_side


def generate_keypatch_map(
    mask: NDArray, cfg: GeneratorConfig = GeneratorConfig()
) -> KeyPatchMap:
    lesion = check_mask(mask, cfg.patch_side)
    grid_rows = lesion.shape[0] // cfg.patch_side
    grid_cols = lesion.shape[1] // cfg.patch_side
    values = np.zeros(grid_rows * grid_cols, dtype=np.uint8)

    points = score_boundary(trace_boundary(lesion), lesion, cfg)
    for p in nms_filter(points, cfg.nms_neighbors):
        values[to_patch_index(p.row, p.col, cfg.patch_side, grid_cols)] = 1
    return KeyPatchMap(values, grid_rows, grid_cols)
