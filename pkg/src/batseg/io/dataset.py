"""
    batseg.io.dataset
    ~~~~~~~~~~~~~~~~~

    Dataset directories: ``images/<id>.ppm``, ``masks/<id>.pgm`` and a
    ``manifest.json`` holding the ids, the generating spec and a sha256 of
    every image and mask file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Sequence

from ..config import SyntheticSpec
from ..data import Sample
from ..errors import FormatError, IntegrityError
from .pnm import read_image, read_mask, write_image, write_mask

MANIFEST = "manifest.json"


@dataclass
class Dataset:
    samples: list[Sample]
    spec: SyntheticSpec | None = None

    def __len__(self) -> int:
        return len(self.samples)


def _digest(root: Path, entries: Sequence[dict]) -> str:
    h = hashlib.sha256()
    for entry in entries:
        h.update((root / entry["image"]).read_bytes())
        h.update((root / entry["mask"]).read_bytes())
    return h.hexdigest()


def write_dataset(
    root: str | PathLike, samples: Sequence[Sample], spec: SyntheticSpec | None = None
) -> Path:
    """Write images, masks and the manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in samples:
        entry = {
            "id": sample.id,
            "image": f"images/{sample.id}.ppm",
            "mask": f"masks/{sample.id}.pgm",
        }
        write_image(root / entry["image"], sample.image)
        write_mask(root / entry["mask"], sample.mask)
        entries.append(entry)

    manifest = {
        "count": len(entries),
        "spec": None if spec is None else spec.model_dump(),
        "samples": entries,
        "sha256": _digest(root, entries),
    }
    path = root / MANIFEST
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_dataset(root: str | PathLike) -> Dataset:
    root = Path(root)
    path = root / MANIFEST
    try:
        manifest = json.loads(path.read_text())
        entries = manifest["samples"]
        count = int(manifest["count"])
        digest = manifest["sha256"]
        spec = manifest.get("spec")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(path, f"invalid manifest ({e})")

    on_disk = {
        "images": {p.name for p in (root / "images").glob("*.ppm")},
        "masks": {p.name for p in (root / "masks").glob("*.pgm")},
    }
    if count != len(entries) or any(len(v) != count for v in on_disk.values()):
        raise IntegrityError(
            path,
            f"manifest lists {count} samples ({len(entries)} entries), found "
            f"{len(on_disk['images'])} images and {len(on_disk['masks'])} masks",
        )
    if _digest(root, entries) != digest:
        raise IntegrityError(path, "content hash mismatch")

    samples = [
        Sample(
            image=read_image(root / e["image"]),
            mask=read_mask(root / e["mask"]),
            id=e["id"],
        )
        for e in entries
    ]
    return Dataset(samples, None if spec is None else SyntheticSpec(**spec))
