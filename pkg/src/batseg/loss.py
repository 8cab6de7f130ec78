"""
    batseg.loss
    ~~~~~~~~~~~

    The hybrid objective: a Dice loss on the segmentation plus one binary
    cross-entropy term per predicted key-patch map, every map supervised by
    the same ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ContractError

DICE_SMOOTH = 1.0
CE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    seg_loss: float
    map_losses: tuple[float, ...]
    total: float

    @classmethod
    def from_terms(cls, seg_loss: float, map_losses: Sequence[float]) -> LossBreakdown:
        map_losses = tuple(float(v) for v in map_losses)
        return cls(float(seg_loss), map_losses, float(seg_loss) + sum(map_losses))

    @classmethod
    def mean(cls, items: Sequence[LossBreakdown]) -> LossBreakdown:
        """Term-wise mean; the total is rebuilt from the averaged terms."""
        if not items:
            raise ContractError("cannot average an empty list of losses")
        seg = float(np.mean([b.seg_loss for b in items]))
        maps = np.mean([b.map_losses for b in items], axis=0).reshape(-1)
        return cls.from_terms(seg, maps)

    def weighted(self, map_weight: float) -> float:
        """Objective value with every map term scaled by `map_weight`."""
        return self.seg_loss + map_weight * sum(self.map_losses)

    def to_dict(self) -> dict:
        return {
            "seg_loss": self.seg_loss,
            "map_losses": list(self.map_losses),
            "total": self.total,
        }


def _same_shape(a: NDArray, b: NDArray):
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice_loss(gt: ArrayLike, pred: ArrayLike) -> float:
    """1 - (2·Σpg + 1) / (Σp + Σg + 1)"""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _same_shape(gt, pred)
    overlap = (pred * gt).sum()
    return float(
        1 - (2 * overlap + DICE_SMOOTH) / (pred.sum() + gt.sum() + DICE_SMOOTH)
    )


def dice_loss_grad(gt: ArrayLike, pred: ArrayLike) -> NDArray[np.float64]:
    """Gradient of `dice_loss` with respect to `pred`."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _same_shape(gt, pred)
    numerator = 2 * (pred * gt).sum() + DICE_SMOOTH
    denominator = pred.sum() + gt.sum() + DICE_SMOOTH
    return -(2 * gt * denominator - numerator) / denominator**2


def map_ce_loss(gt: ArrayLike, pred: ArrayLike) -> float:
    """Mean binary cross-entropy over the patches."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _same_shape(gt, pred)
    m = np.clip(pred, CE_CLAMP, 1 - CE_CLAMP)
    return float(-(gt * np.log(m) + (1 - gt) * np.log(1 - m)).mean())


def map_ce_loss_grad(gt: ArrayLike, pred: ArrayLike) -> NDArray[np.float64]:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _same_shape(gt, pred)
    m = np.clip(pred, CE_CLAMP, 1 - CE_CLAMP)
    inside = (pred > CE_CLAMP) & (pred < 1 - CE_CLAMP)
    return np.where(inside, (-gt / m + (1 - gt) / (1 - m)) / gt.size, 0.0)


def total_loss(
    seg_gt: ArrayLike,
    seg_pred: ArrayLike,
    map_gt: ArrayLike,
    map_preds: Sequence[ArrayLike],
    *,
    map_count: int,
) -> LossBreakdown:
    """Dice loss plus the cross-entropy of every map against `map_gt`.

    `map_count` is the number of maps the model must supply (n+1 for a
    boundary-aware model with n encoder layers).
    """
    if len(map_preds) != map_count:
        raise ContractError(f"expected {map_count} attention maps, got {len(map_preds)}")
    return LossBreakdown.from_terms(
        dice_loss(seg_gt, seg_pred),
        [map_ce_loss(map_gt, m) for m in map_preds],
    )
