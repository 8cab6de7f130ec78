from .checkpoint import CHECKPOINT_MAGIC, load_checkpoint, save_checkpoint
from .dataset import MANIFEST, Dataset, read_dataset, write_dataset
from .pnm import (
    read_gray,
    read_image,
    read_mask,
    to_bytes,
    write_image,
    write_mask,
    write_probability_map,
)
from .records import read_keypatch_map, read_metrics_log, write_keypatch_map

__all__ = [
    "CHECKPOINT_MAGIC",
    "MANIFEST",
    "Dataset",
    "load_checkpoint",
    "read_dataset",
    "read_gray",
    "read_image",
    "read_keypatch_map",
    "read_mask",
    "read_metrics_log",
    "save_checkpoint",
    "to_bytes",
    "write_dataset",
    "write_image",
    "write_keypatch_map",
    "write_mask",
    "write_probability_map",
]
