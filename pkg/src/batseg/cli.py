"""
    batseg.cli
    ~~~~~~~~~~

    Command line interface.

    Options may also come from a ``key=value`` file given with ``--config``;
    explicit options win over the file.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import typer
from pydantic import ValidationError

from . import io
from .config import (
    GeneratorConfig,
    ModelConfig,
    SyntheticSpec,
    TrainConfig,
    read_key_values,
)
from .data import generate_dataset, split
from .errors import BatsegError
from .harness import ablation, evaluate, gradcheck, predict, report, train
from .keypatch import generate_keypatch_map

app = typer.Typer(
    name="batseg",
    help="Boundary-aware transformer for binary lesion segmentation.",
    no_args_is_help=True,
    add_completion=False,
    pretty_exceptions_enable=False,
)

ConfigOption = typer.Option(
    None,
    "--config",
    exists=True,
    dir_okay=False,
    help="key=value configuration file.",
)


def _values(config: Optional[Path], *models: type) -> dict[str, str]:
    """File values, after checking that every key belongs to one of `models`."""
    if config is None:
        return {}
    try:
        values = read_key_values(config)
    except ValueError as e:
        raise typer.BadParameter(str(e), param_hint="--config")
    known = set().union(*(m.model_fields for m in models))
    if unknown := sorted(set(values) - known):
        raise typer.BadParameter(f"unknown keys {unknown}", param_hint="--config")
    return values


@app.callback()
def _main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log progress."),
):
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@app.command("gen-data")
def gen_data(
    out: Path = typer.Option(..., help="Output directory."),
    seed: Optional[int] = typer.Option(None),
    count: Optional[int] = typer.Option(None),
    size: Optional[int] = typer.Option(None, help="Image side in pixels."),
    contrast: Optional[str] = typer.Option(None, help="low, medium or high."),
    hair: Optional[int] = typer.Option(None, help="Hair arcs per image."),
    rough: Optional[float] = typer.Option(None, help="Boundary roughness."),
    lesion_scale: Optional[float] = typer.Option(None, help="Lesion size factor."),
    config: Optional[Path] = ConfigOption,
):
    """Generate a synthetic lesion dataset."""
    spec = SyntheticSpec.from_values(
        _values(config, SyntheticSpec),
        seed=seed,
        count=count,
        image_side=size,
        contrast=contrast,
        hair_density=hair,
        boundary_roughness=rough,
        lesion_scale=lesion_scale,
    )
    manifest = io.write_dataset(out, generate_dataset(spec), spec)
    typer.echo(manifest)


@app.command()
def keypatch(
    mask: Path = typer.Option(
        ..., exists=True, dir_okay=False, help="Binary PGM mask."
    ),
    out: Optional[Path] = typer.Option(None, help="JSON output (default: stdout)."),
    radius: Optional[int] = typer.Option(None),
    nms: Optional[int] = typer.Option(None, help="NMS window half-width."),
    patch: Optional[int] = typer.Option(None, help="Patch side."),
    config: Optional[Path] = ConfigOption,
):
    """Generate the key-patch map of a mask."""
    cfg = GeneratorConfig.from_values(
        _values(config, GeneratorConfig),
        radius=radius,
        nms_neighbors=nms,
        patch_side=patch,
    )
    kp = generate_keypatch_map(io.read_mask(mask), cfg)
    if out is None:
        typer.echo(kp.to_json())
    else:
        io.write_keypatch_map(out, kp)


def _model_config(values: dict, image_side: int | None, **flags) -> ModelConfig:
    return ModelConfig.from_values(values, image_side=image_side, **flags)


@app.command("train")
def train_command(
    data: Path = typer.Option(
        ..., exists=True, file_okay=False, help="Dataset directory."
    ),
    out: Path = typer.Option(..., help="Directory for checkpoint and metrics log."),
    val: Optional[Path] = typer.Option(
        None, exists=True, file_okay=False, help="Validation dataset directory."
    ),
    val_fraction: float = typer.Option(0.2, help="Held-out share without --val."),
    lr: Optional[float] = typer.Option(None),
    batch: Optional[int] = typer.Option(None),
    epochs: Optional[int] = typer.Option(None),
    patience: Optional[int] = typer.Option(None),
    decay: Optional[float] = typer.Option(None),
    seed: Optional[int] = typer.Option(None),
    augment: Optional[bool] = typer.Option(None, "--augment/--no-augment"),
    map_weight: Optional[float] = typer.Option(None),
    channels: Optional[int] = typer.Option(None),
    layers: Optional[int] = typer.Option(None),
    heads: Optional[int] = typer.Option(None),
    variant: Optional[str] = typer.Option(None, help="bat, transformer or cnn."),
    config: Optional[Path] = ConfigOption,
):
    """Train a model and keep the best validation checkpoint."""
    values = _values(config, ModelConfig, TrainConfig)
    train_cfg = TrainConfig.from_values(
        values,
        lr=lr,
        batch=batch,
        max_epochs=epochs,
        plateau_patience=patience,
        lr_decay=decay,
        seed=seed,
        augment=augment,
        map_weight=map_weight,
    )
    dataset = io.read_dataset(data)
    if val is None:
        train_set, val_set = split(dataset.samples, val_fraction, train_cfg.seed)
    else:
        train_set, val_set = dataset.samples, io.read_dataset(val).samples
    model_cfg = _model_config(
        values,
        train_set[0].mask.shape[0],
        channels=channels,
        layers=layers,
        heads=heads,
        variant=variant,
    )
    result = train(train_set, val_set, model_cfg, train_cfg, out_dir=out)
    typer.echo(json.dumps({"best_val_seg_loss": result.best_val_loss}))


@app.command("eval")
def eval_command(
    data: Path = typer.Option(
        ..., exists=True, file_okay=False, help="Dataset directory with ground truth."
    ),
    checkpoint: Optional[Path] = typer.Option(
        None, exists=True, dir_okay=False, help="Model checkpoint."
    ),
    pred: Optional[Path] = typer.Option(
        None,
        exists=True,
        file_okay=False,
        help="Directory of <id>.pgm probability maps, instead of a model.",
    ),
    threshold: float = typer.Option(0.5),
    out: Optional[Path] = typer.Option(None, help="JSON report (default: stdout)."),
):
    """Dice and IoU of a checkpoint, or of saved predictions."""
    if (checkpoint is None) == (pred is None):
        raise typer.BadParameter("give exactly one of --checkpoint and --pred")
    samples = io.read_dataset(data).samples
    if checkpoint is not None:
        result = evaluate(io.load_checkpoint(checkpoint), samples, threshold)
    else:
        result = report(
            [s.id for s in samples],
            [s.mask for s in samples],
            [io.read_gray(pred / f"{s.id}.pgm") for s in samples],
            threshold,
        )
    if out is None:
        typer.echo(result.to_json())
    else:
        out.write_text(result.to_json())


@app.command("gradcheck")
def gradcheck_command(
    params: int = typer.Option(100, "--params", help="Entries to check."),
    tol: float = typer.Option(1e-4, "--tol"),
    step: float = typer.Option(1e-5, "--step", help="Finite-difference step."),
    seed: int = typer.Option(0),
    map_weight: float = typer.Option(1.0),
    size: Optional[int] = typer.Option(None, help="Image side."),
    channels: Optional[int] = typer.Option(None),
    layers: Optional[int] = typer.Option(None),
    heads: Optional[int] = typer.Option(None),
    variant: Optional[str] = typer.Option(None),
    config: Optional[Path] = ConfigOption,
):
    """Compare analytic gradients with central differences."""
    cfg = _model_config(
        _values(config, ModelConfig),
        size,
        channels=channels,
        layers=layers,
        heads=heads,
        variant=variant,
    )
    result = gradcheck(cfg, params, tol, h=step, seed=seed, map_weight=map_weight)
    typer.echo(json.dumps(result.to_dict(), indent=2))
    if not result.passed:
        raise typer.Exit(1)


@app.command("predict")
def predict_command(
    checkpoint: Path = typer.Option(..., exists=True, dir_okay=False),
    out: Path = typer.Option(..., help="Output directory for PGM maps."),
    images: list[Path] = typer.Argument(
        ..., exists=True, dir_okay=False, help="PPM images."
    ),
):
    """Write a PGM probability map for every input image."""
    params = io.load_checkpoint(checkpoint)
    maps = predict(params, np.stack([io.read_image(p) for p in images]))
    out.mkdir(parents=True, exist_ok=True)
    for path, prob in zip(images, maps):
        io.write_probability_map(out / f"{path.stem}.pgm", prob)


@app.command("ablation")
def ablation_command(
    data: Path = typer.Option(..., exists=True, file_okay=False),
    val: Path = typer.Option(..., exists=True, file_okay=False),
    seeds: str = typer.Option("0,1,2", help="Comma separated seeds."),
    variants: str = typer.Option("bat,transformer,cnn"),
    out: Optional[Path] = typer.Option(None, help="CSV output (default: stdout)."),
    config: Optional[Path] = ConfigOption,
):
    """Train and score every (variant, seed) pair."""
    values = _values(config, ModelConfig, TrainConfig)
    train_set = io.read_dataset(data).samples
    table = ablation(
        train_set,
        io.read_dataset(val).samples,
        _model_config(values, train_set[0].mask.shape[0]),
        TrainConfig.from_values(values),
        seeds=[int(s) for s in seeds.split(",")],
        variants=variants.split(","),
    )
    if out is None:
        typer.echo(table.to_csv(index=False))
    else:
        table.to_csv(out, index=False)


def main(argv: list[str] | None = None) -> int:
    """Run the CLI; returns 2 on usage errors and 1 on runtime failures.

    Usage errors, including input paths that do not exist, are reported by
    typer itself before any command runs.
    """
    command = typer.main.get_command(app)
    try:
        command.main(args=argv, prog_name="batseg", standalone_mode=True)
    except SystemExit as e:
        if e.code is None or isinstance(e.code, int):
            return e.code or 0
        typer.echo(e.code, err=True)
        return 1
    except ValidationError as e:
        typer.echo(f"error: {e}", err=True)
        return 2
    except (BatsegError, OSError, ValueError) as e:
        typer.echo(f"error: {e}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
