"""
    batseg.io.checkpoint
    ~~~~~~~~~~~~~~~~~~~~

    Binary model checkpoints: the magic ``BATCKPT1``, a uint32 little-endian
    header length, the JSON model configuration, then every parameter as
    little-endian float64 in declaration order.
"""

from __future__ import annotations

import json
import struct
from os import PathLike
from pathlib import Path

import numpy as np

from ..config import ModelConfig
from ..errors import FormatError, NumericalError
from ..model import ParameterSet, parameter_shapes

CHECKPOINT_MAGIC = b"BATCKPT1"


def save_checkpoint(path: str | PathLike, params: ParameterSet):
    params.check_finite()
    header = json.dumps(params.config.model_dump(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for array in params.values():
            f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def load_checkpoint(path: str | PathLike) -> ParameterSet:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(path, "not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        cfg = ModelConfig(**json.loads(data[pos : pos + length]))
    except (struct.error, json.JSONDecodeError, TypeError, ValueError) as e:
        raise FormatError(path, f"invalid header ({e})")
    pos += length

    shapes = parameter_shapes(cfg)
    expected = 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(data) - pos != expected:
        raise FormatError(path, f"expected {expected} parameter bytes, found {len(data) - pos}")
    arrays = {}
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(data, dtype="<f8", count=size, offset=pos)
            .astype(np.float64)
            .reshape(shape)
        )
        pos += 8 * size
    params = ParameterSet(cfg, arrays)
    try:
        params.check_finite()
    except NumericalError as e:
        raise FormatError(path, str(e))
    return params
