"""``.smnt`` checkpoint container.

Layout: magic ``SMNT``, u32 version, u32 metadata length, UTF-8 JSON
metadata (model config, parameter table with name/shape/offset,
normalisation constants, seed, split indices), then the parameter arrays
as little-endian float32 in table order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .smnet import ModelConfig, SuperMeshingNet

MAGIC = b"SMNT"
VERSION = 1
_HEAD = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    norm_min: float = 0.0
    norm_max: float = 1.0
    seed: int = 0
    split: dict[str, list[int]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SuperMeshingNet, norm=(0.0, 1.0), seed: int = 0,
                   split=None, extra=None) -> "Checkpoint":
        return cls(model.config, model.state_dict(), float(norm[0]), float(norm[1]), seed,
                   dict(split or {}), dict(extra or {}))

    def build_model(self) -> SuperMeshingNet:
        model = SuperMeshingNet(ModelConfig.from_dict(self.config.to_dict()))
        model.load_state_dict(self.state)
        return model

    def to_bytes(self) -> bytes:
        table = []
        offset = 0
        blobs = []
        for name, arr in self.state.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            table.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(blob)
            offset += len(blob)
        meta = {
            "config": self.config.to_dict(),
            "parameters": table,
            "normalization": {"min": self.norm_min, "max": self.norm_max},
            "seed": self.seed,
            "split": self.split,
            "extra": self.extra,
        }
        meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _HEAD.pack(MAGIC, VERSION, len(meta_bytes)) + meta_bytes + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _HEAD.size:
            raise FormatError("truncated checkpoint header", len(raw))
        magic, version, meta_len = _HEAD.unpack_from(raw, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        start = _HEAD.size
        if len(raw) < start + meta_len:
            raise FormatError("truncated checkpoint metadata", len(raw))
        try:
            meta = json.loads(raw[start:start + meta_len].decode("utf-8"))
            config = ModelConfig.from_dict(meta["config"])
            table = meta["parameters"]
            norm = meta["normalization"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"unreadable checkpoint metadata: {exc}", start) from None
        base = start + meta_len
        state = {}
        expected = 0
        for entry in table:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape))
            offset = int(entry["offset"])
            if offset != expected:
                raise FormatError(f"parameter {entry['name']!r} has corrupt offset {offset}",
                                  base + offset)
            end = base + offset + 4 * count
            if end > len(raw):
                raise FormatError(f"parameter {entry['name']!r} runs past end of file", len(raw))
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=base + offset)
            state[entry["name"]] = arr.reshape(shape).astype(np.float32)
            expected = offset + 4 * count
        if base + expected != len(raw):
            raise FormatError("trailing bytes after parameter data", base + expected)
        return cls(config, state, float(norm["min"]), float(norm["max"]), int(meta.get("seed", 0)),
                   {k: list(v) for k, v in meta.get("split", {}).items()}, meta.get("extra", {}))


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
