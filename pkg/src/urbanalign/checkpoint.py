"""Versioned JSON checkpoint container with bit-exact float64 arrays.

Arrays are stored as base64 of their little-endian float64 bytes, so a
save/load round trip reproduces every value exactly.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


def encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "dtype": "float64",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def decode_array(spec: dict) -> np.ndarray:
    raw = base64.b64decode(spec["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(spec["shape"])


@dataclass
class Checkpoint:
    configs: dict
    arrays: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    doc = {
        "version": ckpt.version,
        "configs": ckpt.configs,
        "arrays": {name: encode_array(a) for name, a in sorted(ckpt.arrays.items())},
        "extra": ckpt.extra,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    return Checkpoint(
        configs=doc["configs"],
        arrays={name: decode_array(spec) for name, spec in doc["arrays"].items()},
        extra=doc.get("extra", {}),
        version=doc["version"],
    )
