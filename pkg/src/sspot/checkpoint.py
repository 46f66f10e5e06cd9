"""Binary checkpoint format.

Layout::

    b"SSPOTCKP"                 8-byte magic
    version                     1 byte
    header length               uint64, little-endian
    header                      UTF-8 JSON (model config, optimizer settings,
                                step counter, tensor directory with CRC32s)
    tensor blobs                float64 little-endian, directory order
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, count_parameters
from .tensor import Tensor

MAGIC = b"SSPOTCKP"
VERSION = 1
_BLOB = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _optim_arrays(state) -> "OrderedDict[str, np.ndarray]":
    arrays = OrderedDict()
    if state is None:
        return arrays
    for name in state.m:
        arrays[f"adam.m/{name}"] = state.m[name]
        arrays[f"adam.v/{name}"] = state.v[name]
    return arrays


def save_checkpoint(params: ModelParams, optim_state, path: str | Path, extra: dict | None = None) -> Path:
    """Write params (and optionally optimizer moments) atomically."""
    path = Path(path)
    arrays: OrderedDict[str, np.ndarray] = OrderedDict((k, t.data) for k, t in params.items())
    arrays.update(_optim_arrays(optim_state))

    directory = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype=_BLOB)
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": blob.nbytes,
                          "crc32": zlib.crc32(memoryview(blob).cast("B"))})
        offset += blob.nbytes
        blobs.append(blob)

    header = {
        "model_config": params.config.to_dict(),
        "parameter_count": count_parameters(params),
        "optimizer": optim_state.settings() if optim_state is not None else None,
        "tensors": directory,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(memoryview(blob).cast("B"))
    os.replace(tmp, path)
    return path


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, Path(path))[0]


def _read_header(fh, path: Path) -> tuple[dict, int]:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
    version = fh.read(1)
    if not version or version[0] != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version!r}")
    raw_len = fh.read(8)
    if len(raw_len) != 8:
        raise CheckpointError(f"{path}: truncated before header length")
    (n,) = struct.unpack("<Q", raw_len)
    head = fh.read(n)
    if len(head) != n:
        raise CheckpointError(f"{path}: truncated header ({len(head)} of {n} bytes)")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    return header, len(MAGIC) + 1 + 8 + n


def load_checkpoint(path: str | Path):
    """Return (ModelParams, OptimState | None); raises CheckpointError on any damage."""
    from .training import OptimState

    path = Path(path)
    with open(path, "rb") as fh:
        header, _ = _read_header(fh, path)
        body = fh.read()
    arrays = OrderedDict()
    for entry in header["tensors"]:
        blob = body[entry["offset"]: entry["offset"] + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise CheckpointError(
                f"{path}: tensor {entry['name']} truncated ({len(blob)} of {entry['nbytes']} bytes)"
            )
        if zlib.crc32(blob) != entry["crc32"]:
            raise CheckpointError(f"{path}: CRC32 mismatch in tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=_BLOB).reshape(entry["shape"]).astype(np.float64)
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(body) != expected:
        raise CheckpointError(f"{path}: body is {len(body)} bytes, directory describes {expected}")

    config = ModelConfig.from_dict(header["model_config"])
    tensors = OrderedDict(
        (k, Tensor(v, requires_grad=True)) for k, v in arrays.items() if not k.startswith("adam.")
    )
    params = ModelParams(config, tensors)
    state = None
    if header.get("optimizer") is not None:
        state = OptimState.from_settings(header["optimizer"])
        for name in tensors:
            key_m, key_v = f"adam.m/{name}", f"adam.v/{name}"
            if key_m in arrays:
                state.m[name] = arrays[key_m]
                state.v[name] = arrays[key_v]
    return params, state
