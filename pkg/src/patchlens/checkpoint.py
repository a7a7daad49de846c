"""Binary checkpoints.

Layout::

    b"PLNS0001"                      8-byte magic (last 4 bytes are the format version)
    uint64 little-endian             length of the JSON header in bytes
    JSON header (UTF-8, sorted keys) model config, train config, step, RNG state, tensor table
    tensor payload                   row-major float64 little-endian, in tensor-table order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import ModelConfig, TrainConfig
from .model import ModelParams, param_shapes

MAGIC = b"PLNS0001"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    train_config: TrainConfig
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return self.params.config


def to_bytes(ckpt: Checkpoint) -> bytes:
    config = ckpt.params.config
    expected = param_shapes(config)
    table = []
    payload = []
    for name, m in ckpt.params:
        if expected.get(name) != m.shape:
            raise CheckpointError(f"tensor {name} has shape {m.shape}, expected {expected.get(name)}")
        table.append({"name": name, "shape": list(m.shape)})
        payload.append(np.ascontiguousarray(m.data, dtype="<f8").tobytes())
    header = {
        "model_config": config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(payload)


def from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError(f"bad magic {data[:8]!r}; expected {MAGIC!r}")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    config = ModelConfig.from_dict(header["model_config"])
    expected = param_shapes(config)
    names = [t["name"] for t in header["tensors"]]
    if names != list(expected):
        raise CheckpointError("tensor table does not match the model layout")
    offset = 16 + n
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        if shape != expected[entry["name"]]:
            raise CheckpointError(f"tensor {entry['name']} has shape {shape}, expected {expected[entry['name']]}")
        size = 8 * shape[0] * shape[1]
        chunk = data[offset : offset + size]
        if len(chunk) != size:
            raise CheckpointError("truncated tensor payload")
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        tensors[entry["name"]] = nc.param(arr, name=entry["name"])
        offset += size
    if offset != len(data):
        raise CheckpointError("trailing bytes after tensor payload")
    return Checkpoint(
        params=ModelParams(config, tensors),
        train_config=TrainConfig.from_dict(header["train_config"]),
        step=int(header["step"]),
        rng_state=header["rng_state"],
    )


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
