"""Binary checkpoint container.

Layout::

    b"WRPG"                      magic
    uint16 LE                    format version
    uint64 LE                    length of the JSON metadata block
    JSON (UTF-8, sorted keys)    metadata; ``tensors`` lists name/shape in blob order
    blobs                        little-endian float32, C order, back to back

The metadata is serialized deterministically so that writing the same state
twice yields identical bytes.
"""
import json
import os
import struct

import numpy as np
import torch

from .errors import (CheckpointError, CheckpointMagicError, CheckpointSchemaError,
                     CheckpointTruncatedError, CheckpointVersionError, DataIOError)

MAGIC = b"WRPG"
VERSION = 1
_HEADER = struct.Struct("<4sHQ")


def _to_array(t):
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().to(torch.float32).contiguous().numpy()
    return np.asarray(t, dtype="<f4", order="C")


def encode_checkpoint(meta: dict, arrays: dict) -> bytes:
    blobs = []
    index = []
    for name, value in arrays.items():
        arr = _to_array(value)
        index.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    meta = dict(meta)
    meta["tensors"] = index
    body = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(body)) + body + b"".join(blobs)


def decode_checkpoint(data: bytes, source="<bytes>"):
    if len(data) < _HEADER.size:
        if not MAGIC.startswith(data[:4]):
            raise CheckpointMagicError(f"{source}: not a WRPG checkpoint")
        raise CheckpointTruncatedError(f"{source}: truncated header")
    magic, version, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointMagicError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, expected {VERSION}")
    start = _HEADER.size
    if len(data) < start + meta_len:
        raise CheckpointTruncatedError(f"{source}: truncated metadata block")
    try:
        meta = json.loads(data[start:start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt metadata ({exc})") from exc
    offset = start + meta_len
    arrays = {}
    for entry in meta.get("tensors", []):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * n
        if end > len(data):
            raise CheckpointTruncatedError(
                f"{source}: truncated while reading array {entry['name']!r}"
            )
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        arrays[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{source}: {len(data) - offset} trailing bytes after last array")
    return meta, arrays


def write_checkpoint(path, meta: dict, arrays: dict):
    data = encode_checkpoint(meta, arrays)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data, str(path))


def load_state_strict(module: torch.nn.Module, arrays: dict, prefix=""):
    """Copy arrays into ``module`` parameters/buffers; shape mismatches name the array."""
    own = module.state_dict()
    for k, v in own.items():
        key = prefix + k
        if key not in arrays:
            raise CheckpointSchemaError(f"checkpoint is missing array {key!r}")
        if tuple(arrays[key].shape) != tuple(v.shape):
            raise CheckpointSchemaError(
                f"array {key!r} has shape {tuple(arrays[key].shape)}, expected {tuple(v.shape)}"
            )
    with torch.no_grad():
        for k, v in own.items():
            v.copy_(arrays[prefix + k])
    return module
