"""Named-tensor checkpoint archives with a versioned magic header."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import read_tensor, write_tensor

MAGIC = b"CAWB1"


class CheckpointError(ValueError):
    """The archive is malformed or from an unknown format version."""


def save_checkpoint(path, config: dict, tensors: Mapping[str, np.ndarray]) -> None:
    """Write magic, a JSON config block, then name/tensor pairs.

    Names are written in sorted order so identical content yields
    identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        names = sorted(tensors)
        fh.write(struct.pack("<Q", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            write_tensor(fh, tensors[name])


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
        (cfg_len,) = struct.unpack("<Q", fh.read(8))
        config = json.loads(fh.read(cfg_len).decode("utf-8"))
        (count,) = struct.unpack("<Q", fh.read(8))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", fh.read(8))
            name = fh.read(name_len).decode("utf-8")
            tensors[name] = read_tensor(fh)
    return config, tensors
