"""Versioned binary checkpoints: JSON metadata, a named tensor table and a CRC32.

Layout (little-endian)::

    "CAFC" | u32 version | u32 meta_len | meta_len bytes of UTF-8 JSON
    u32 tensor_count
    per tensor: u16 name_len | name | u8 dtype | u8 ndim | ndim x u32 dims | raw data
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"CAFC"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointState:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    epoch: int  # last completed epoch, 0 before training
    rng_state: dict[str, Any]
    best_params: dict[str, np.ndarray]
    best_val_accuracy: float | None
    best_epoch: int
    config: dict[str, Any]
    log: list[dict[str, Any]] = field(default_factory=list)
    norm: dict[str, np.ndarray] = field(default_factory=dict)  # feature scaler, empty when unused

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, group in (("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v),
                              ("best", self.best_params), ("norm", self.norm)):
            for name in sorted(group):
                out[f"{prefix}/{name}"] = group[name]
        return out

    def meta(self) -> dict[str, Any]:
        return {
            "step": self.step, "epoch": self.epoch, "rng_state": self.rng_state,
            "best_val_accuracy": self.best_val_accuracy, "best_epoch": self.best_epoch,
            "config": self.config, "log": self.log,
        }


def dumps(state: CheckpointState) -> bytes:
    meta = json.dumps(state.meta(), sort_keys=True, separators=(",", ":")).encode()
    tensors = state.tensors()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def loads(data: bytes) -> CheckpointState:
    try:
        return _parse(data)
    except CheckpointError:
        raise
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {type(exc).__name__}: {exc}") from None


def _parse(data: bytes) -> CheckpointState:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < 16 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CheckpointError("checkpoint CRC32 mismatch or truncated file")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    pos = 12
    meta = json.loads(data[pos : pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}, "best": {}, "norm": {}}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
        dtype = np.dtype(_DTYPES[code])
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=pos).reshape(shape)
        pos += size
        prefix, _, key = name.partition("/")
        if prefix not in groups or not key:
            raise CheckpointError(f"unexpected tensor name {name!r}")
        groups[prefix][key] = arr.astype(dtype.newbyteorder("="))
    return CheckpointState(
        params=groups["param"], adam_m=groups["adam_m"], adam_v=groups["adam_v"],
        step=meta["step"], epoch=meta["epoch"], rng_state=meta["rng_state"],
        best_params=groups["best"], best_val_accuracy=meta["best_val_accuracy"],
        best_epoch=meta["best_epoch"], config=meta["config"], log=meta["log"], norm=groups["norm"],
    )


def save(state: CheckpointState, path) -> Path:
    """Atomic write: a crash mid-save leaves the previous checkpoint intact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(state))
    os.replace(tmp, path)
    return path


def load(path) -> CheckpointState:
    return loads(Path(path).read_bytes())
