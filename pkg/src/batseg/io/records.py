"""
    batseg.io.records
    ~~~~~~~~~~~~~~~~~

    JSON key-patch maps and the JSON-lines training log.
"""

from __future__ import annotations

import json
from os import PathLike
from pathlib import Path

import pandas as pd

from ..errors import FormatError
from ..keypatch import KeyPatchMap

LOG_COLUMNS = ["step", "epoch", "lr", "seg_loss", "map_losses", "total"]


def write_keypatch_map(path: str | PathLike, kp: KeyPatchMap):
    Path(path).write_text(kp.to_json())


def read_keypatch_map(path: str | PathLike) -> KeyPatchMap:
    try:
        return KeyPatchMap.from_json(Path(path).read_text())
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(path, f"invalid key-patch map ({e})")


def read_metrics_log(path: str | PathLike) -> pd.DataFrame:
    """One row per training step."""
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
    return pd.DataFrame.from_records(records, columns=LOG_COLUMNS)
