"""Binary checkpoint container shared by target and draft models.

Layout (little-endian)::

    b"SPDL" | u32 version | u32 config_len | config JSON (utf-8)
    u32 n_tensors
    per tensor: u32 name_len | name (utf-8) | u8 dtype tag | u32 rank | rank x u32 dims | f32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .speculator import Speculator, SpeculatorConfig
from .target import TargetConfig, TargetModel
from .tensor import Tensor

__all__ = [
    "CheckpointError",
    "save_tensors",
    "load_tensors",
    "save_target",
    "load_target",
    "save_speculator",
    "load_speculator",
]

MAGIC = b"SPDL"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def save_tensors(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        key = name.encode()
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    def read_bytes(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if read_bytes(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an SPDL checkpoint")
    version, cfg_len = read("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        config = json.loads(read_bytes(cfg_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block") from exc
    (count,) = read("<I")
    tensors = {}
    for _ in range(count):
        (n,) = read("<I")
        try:
            name = read_bytes(n).decode()
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt tensor name") from exc
        tag, rank = read("<BI")
        if tag != DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        dims = read(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(read_bytes(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = data.copy()
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return config, tensors


def save_target(path, model: TargetModel) -> None:
    save_tensors(path, {"kind": "target", "target": model.config.to_dict()},
                 {k: v.data for k, v in model.weights.items()})


def load_target(path, dtype: str | None = None) -> TargetModel:
    config, tensors = load_tensors(path)
    if config.get("kind") != "target":
        raise CheckpointError(f"{path}: not a target checkpoint")
    cfg = TargetConfig(**config["target"])
    if dtype:
        cfg.dtype = dtype
    dt = cfg.np_dtype
    return TargetModel(cfg, {k: Tensor(v.astype(dt)) for k, v in tensors.items()})


def save_speculator(path, spec: Speculator) -> None:
    # the embedding is lm_head.T of the target and is never stored
    save_tensors(path, {"kind": "speculator", "speculator": spec.config.to_dict(),
                        "target": spec.target.config.to_dict()},
                 {k: v.data for k, v in spec.weights.items()})


def load_speculator(path, target: TargetModel) -> Speculator:
    config, tensors = load_tensors(path)
    if config.get("kind") != "speculator":
        raise CheckpointError(f"{path}: not a speculator checkpoint")
    tcfg = config.get("target", {})
    if tcfg.get("hidden_size") != target.config.hidden_size or tcfg.get("vocab_size") != target.config.vocab_size:
        raise CheckpointError(f"{path}: speculator does not match the target's shape")
    dt = target.config.np_dtype
    return Speculator(target, SpeculatorConfig(**config["speculator"]),
                      {k: Tensor(v.astype(dt)) for k, v in tensors.items()})
