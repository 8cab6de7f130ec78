from .config import GeneratorConfig, ModelConfig, SyntheticSpec, TrainConfig
from .data import Sample, augment, generate_dataset, generate_sample, split
from .errors import (
    BatsegError,
    ContractError,
    FormatError,
    GenerationError,
    IntegrityError,
    NumericalError,
)
from .harness import (
    EvalReport,
    GradcheckReport,
    ablation,
    evaluate,
    gradcheck,
    metrics,
    predict,
    train,
)
from .keypatch import KeyPatchMap, generate_keypatch_map
from .loss import LossBreakdown, total_loss
from .model import ParameterSet, forward, init_parameters, loss_and_gradients

__all__ = [
    "GeneratorConfig",
    "ModelConfig",
    "SyntheticSpec",
    "TrainConfig",
]
__all__ += [
    "BatsegError",
    "ContractError",
    "FormatError",
    "GenerationError",
    "IntegrityError",
    "NumericalError",
]
__all__ += [
    "KeyPatchMap",
    "generate_keypatch_map",
    "LossBreakdown",
    "total_loss",
    "ParameterSet",
    "forward",
    "init_parameters",
    "loss_and_gradients",
]
__all__ += [
    "Sample",
    "augment",
    "generate_dataset",
    "generate_sample",
    "split",
    "EvalReport",
    "GradcheckReport",
    "ablation",
    "evaluate",
    "gradcheck",
    "metrics",
    "predict",
    "train",
]
