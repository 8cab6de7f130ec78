"""
    batseg.harness
    ~~~~~~~~~~~~~~

    Training (Adam with a plateau schedule), evaluation, prediction, the
    finite-difference gradient check and the variant ablation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from .config import GeneratorConfig, ModelConfig, SyntheticSpec, TrainConfig
from .data import Sample, augment, generate_dataset
from .errors import ContractError, NumericalError
from .io import save_checkpoint
from .keypatch import generate_keypatch_map
from .loss import dice_loss
from .model import (
    Gradients,
    ParameterSet,
    evaluate_objective,
    forward,
    init_parameters,
    loss_and_gradients,
    parameter_group,
)

logger = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.bat"
METRICS_LOG = "metrics.jsonl"


# Metrics


def metrics(gt: NDArray, pred: NDArray, threshold: float = 0.5) -> tuple[float, float]:
    """(dice, iou) of `pred` binarized at `threshold` (``pred >= threshold``)."""
    gt = np.asarray(gt) > 0
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ContractError(f"shape mismatch: {gt.shape} vs {pred.shape}")
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must be in (0, 1), got {threshold}")
    p = pred >= threshold

    overlap = int((p & gt).sum())
    total = int(p.sum()) + int(gt.sum())
    if total == 0:
        return 1.0, 1.0
    return 2 * overlap / total, overlap / (total - overlap)


@dataclass
class EvalReport:
    table: pd.DataFrame
    threshold: float = 0.5

    @property
    def mean_dice(self) -> float:
        return float(self.table["dice"].mean())

    @property
    def mean_iou(self) -> float:
        return float(self.table["iou"].mean())

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "mean_dice": self.mean_dice,
            "mean_iou": self.mean_iou,
            "samples": self.table.to_dict(orient="records"),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def report(
    ids: Sequence[str],
    masks: Sequence[NDArray],
    predictions: Sequence[NDArray],
    threshold: float = 0.5,
) -> EvalReport:
    rows = [
        (i, *metrics(gt, pred, threshold))
        for i, gt, pred in zip(ids, masks, predictions, strict=True)
    ]
    return EvalReport(pd.DataFrame(rows, columns=["id", "dice", "iou"]), threshold)


def predict(params: ParameterSet, images: NDArray, batch: int = 8) -> NDArray[np.float64]:
    """Probability maps for (N, H, W, 3) images, evaluated `batch` at a time."""
    images = np.asarray(images, dtype=np.float64)
    return np.concatenate(
        [forward(images[i : i + batch], params).prediction for i in range(0, len(images), batch)]
    )


def evaluate(
    params: ParameterSet, samples: Sequence[Sample], threshold: float = 0.5
) -> EvalReport:
    predictions = predict(params, np.stack([s.image for s in samples]))
    return report([s.id for s in samples], [s.mask for s in samples], predictions, threshold)


# Optimization


@dataclass
class AdamState:
    m: dict[str, NDArray] = field(default_factory=dict)
    v: dict[str, NDArray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParameterSet,
    grads: Mapping[str, NDArray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    for path in params:
        g = grads[path]
        if g.shape != params[path].shape:
            raise ContractError(f"{path}: gradient shape {g.shape} != {params[path].shape}")
        if not np.isfinite(g).all():
            raise NumericalError("non-finite gradient", path=path)

    b1, b2 = betas
    t = state.t + 1
    arrays, m, v = {}, {}, {}
    for path, value in params.items():
        g = grads[path]
        m[path] = b1 * state.m.get(path, 0.0) + (1 - b1) * g
        v[path] = b2 * state.v.get(path, 0.0) + (1 - b2) * g * g
        m_hat = m[path] / (1 - b1**t)
        v_hat = v[path] / (1 - b2**t)
        arrays[path] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    updated = ParameterSet(params.config, arrays)
    updated.check_finite()
    return updated, AdamState(m, v, t)


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by `decay` once the monitored loss has
    not improved for `patience` consecutive epochs."""

    lr: float
    patience: int = 10
    decay: float = 0.5
    best: float = math.inf
    wait: int = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.decay
                self.wait = 0
                logger.info("learning rate decayed to %g", self.lr)
        return self.lr


# Training


@dataclass
class TrainResult:
    params: ParameterSet
    best_params: ParameterSet
    best_val_loss: float
    history: pd.DataFrame
    log: list[dict] = field(repr=False)


def _targets(
    masks: Sequence[NDArray], gen_cfg: GeneratorConfig
) -> NDArray[np.float64]:
    return np.stack([generate_keypatch_map(m, gen_cfg).values for m in masks]).astype(
        np.float64
    )


def seg_loss(params: ParameterSet, samples: Sequence[Sample]) -> float:
    """Mean Dice loss of the model over `samples`."""
    predictions = predict(params, np.stack([s.image for s in samples]))
    return float(np.mean([dice_loss(s.mask, p) for s, p in zip(samples, predictions)]))


def train(
    train_set: Sequence[Sample],
    val_set: Sequence[Sample] | None,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    *,
    gen_cfg: GeneratorConfig | None = None,
    out_dir: str | PathLike | None = None,
) -> TrainResult:
    """Train from freshly initialized parameters.

    Each epoch visits the training set in shuffled mini-batches. The
    learning rate follows a `PlateauSchedule` on the validation Dice loss
    (the training set stands in when `val_set` is empty), and the
    parameters with the best validation loss are kept. With `out_dir`,
    the best checkpoint and a JSON-lines log of every step are written
    there.
    """
    if not train_set:
        raise ContractError("empty training set")
    gen_cfg = gen_cfg or GeneratorConfig(patch_side=model_cfg.patch_side)
    if gen_cfg.patch_side != model_cfg.patch_side:
        raise ContractError(
            f"generator patch side {gen_cfg.patch_side} != model patch side "
            f"{model_cfg.patch_side}"
        )
    val_set = val_set or train_set

    init_seq, run_seq = np.random.SeedSequence(train_cfg.seed).spawn(2)
    rng = np.random.default_rng(run_seq)
    params = init_parameters(model_cfg, np.random.default_rng(init_seq))
    state = AdamState()

    images = np.stack([s.image for s in train_set])
    masks = np.stack([s.mask for s in train_set])
    keymaps = None if train_cfg.augment else _targets(masks, gen_cfg)

    best_params = params.copy()
    best_val = seg_loss(params, val_set)
    schedule = PlateauSchedule(
        train_cfg.lr, train_cfg.plateau_patience, train_cfg.lr_decay, best=best_val
    )
    log, history = [], []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / CHECKPOINT, best_params)
        log_file = open(out_dir / METRICS_LOG, "w")

    step = 0
    try:
        for epoch in range(train_cfg.max_epochs):
            order = rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), train_cfg.batch):
                idx = order[start : start + train_cfg.batch]
                if train_cfg.augment:
                    batch = [augment(train_set[i], rng) for i in idx]
                    x = np.stack([s.image for s in batch])
                    y = np.stack([s.mask for s in batch])
                    k = _targets(y, gen_cfg)
                else:
                    x, y, k = images[idx], masks[idx], keymaps[idx]

                try:
                    objective = loss_and_gradients(
                        params, x, y, k, map_weight=train_cfg.map_weight
                    )
                    params, state = adam_step(params, objective.gradients, state, schedule.lr)
                except NumericalError as e:
                    raise NumericalError("training diverged", path=e.path, step=step) from e

                record = {"step": step, "epoch": epoch, "lr": schedule.lr}
                record.update(objective.breakdown.to_dict())
                log.append(record)
                if out_dir is not None:
                    log_file.write(json.dumps(record) + "\n")
                losses.append(objective.value)
                step += 1

            val_loss = seg_loss(params, val_set)
            if val_loss < best_val:
                best_val = val_loss
                best_params = params.copy()
                if out_dir is not None:
                    save_checkpoint(out_dir / CHECKPOINT, best_params)
            lr = schedule.lr
            schedule.step(val_loss)
            history.append((epoch, lr, float(np.mean(losses)), val_loss))
            logger.info(
                "epoch %d: lr %g, train objective %.5f, val seg loss %.5f",
                epoch, lr, history[-1][2], val_loss,
            )
    finally:
        if out_dir is not None:
            log_file.close()

    return TrainResult(
        params,
        best_params,
        best_val,
        pd.DataFrame(history, columns=["epoch", "lr", "train_objective", "val_seg_loss"]),
        log,
    )


# Gradient check


@dataclass
class GradcheckReport:
    table: pd.DataFrame
    tolerance: float
    step: float

    @property
    def max_rel_error(self) -> float:
        errors = self.table["rel_error"].to_numpy()
        return math.inf if np.isnan(errors).any() else float(errors.max(initial=0.0))

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def groups(self) -> list[str]:
        return list(dict.fromkeys(self.table["group"]))

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "step": self.step,
            "groups": self.groups,
            "checked": len(self.table),
        }


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck_batch(cfg: ModelConfig, batch: int = 1, seed: int = 0):
    """A fixed synthetic (images, masks, keymaps) batch for `cfg`."""
    spec = SyntheticSpec(
        seed=seed, count=batch, image_side=cfg.image_side, boundary_roughness=0.3
    )
    samples = generate_dataset(spec)
    masks = np.stack([s.mask for s in samples])
    return (
        np.stack([s.image for s in samples]),
        masks,
        _targets(masks, GeneratorConfig(patch_side=cfg.patch_side)),
    )


def gradcheck(
    model_cfg: ModelConfig = ModelConfig(),
    n_params: int = 100,
    tolerance: float = 1e-4,
    *,
    h: float = 1e-5,
    seed: int = 0,
    batch: int = 1,
    map_weight: float = 1.0,
    params: ParameterSet | None = None,
    gradient_hook: Callable[[Gradients], Gradients] | None = None,
) -> GradcheckReport:
    """Compare analytic gradients with central differences of the objective.

    Entries are drawn round-robin over the parameter groups (every group is
    covered once `n_params` reaches the number of groups), at a random
    position within a random array of the group. `gradient_hook` may
    replace the analytic gradients before the comparison.
    """
    if n_params < 1:
        raise ContractError("n_params must be at least 1")
    rng = np.random.default_rng(seed)
    params = (params or init_parameters(model_cfg, rng)).copy()
    images, masks, keymaps = gradcheck_batch(params.config, batch, seed)

    analytic = loss_and_gradients(
        params, images, masks, keymaps, map_weight=map_weight
    ).gradients
    if gradient_hook is not None:
        analytic = gradient_hook(analytic)

    by_group: dict[str, list[str]] = {}
    for path in params:
        if params[path].size:
            by_group.setdefault(parameter_group(path), []).append(path)
    groups = list(by_group)

    def objective() -> float:
        return evaluate_objective(params, images, masks, keymaps, map_weight=map_weight)[1]

    rows = []
    for k in range(n_params):
        group = groups[k % len(groups)]
        path = by_group[group][rng.integers(len(by_group[group]))]
        array = params[path]
        index = tuple(int(rng.integers(n)) for n in array.shape)
        old = array[index]
        array[index] = old + h
        fp = objective()
        array[index] = old - h
        fm = objective()
        array[index] = old
        numeric = (fp - fm) / (2 * h)
        a = float(analytic[path][index])
        rows.append((group, path, index, a, numeric, relative_error(a, numeric)))

    result = GradcheckReport(
        pd.DataFrame(
            rows, columns=["group", "path", "index", "analytic", "numeric", "rel_error"]
        ),
        tolerance,
        h,
    )
    if not result.passed:
        worst = result.table.loc[result.table["rel_error"].fillna(math.inf).idxmax()]
        logger.warning(
            "gradient check failed: %s%s relative error %g",
            worst["path"], list(worst["index"]), worst["rel_error"],
        )
    return result


# Ablation


def ablation(
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    *,
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] = ("bat", "transformer", "cnn"),
) -> pd.DataFrame:
    """Validation Dice/IoU of the best checkpoint of every (variant, seed)."""
    rows = []
    for variant in variants:
        cfg = ModelConfig(**{**model_cfg.model_dump(), "variant": variant})
        for seed in seeds:
            run_cfg = TrainConfig(**{**train_cfg.model_dump(), "seed": seed})
            result = train(train_set, val_set, cfg, run_cfg)
            scores = evaluate(result.best_params, val_set)
            rows.append((variant, seed, scores.mean_dice, scores.mean_iou))
            logger.info(
                "ablation %s seed %d: dice %.4f, iou %.4f", variant, seed, *rows[-1][2:]
            )
    return pd.DataFrame(rows, columns=["variant", "seed", "dice", "iou"])
