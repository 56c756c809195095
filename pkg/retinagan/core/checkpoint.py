#!/usr/bin/env python3
"""
Checkpoint Format
Binary container for parameters, optimizer moments and spectral-norm vectors.

Layout:
    b"RGAN" | uint32 LE version | uint64 LE header length | JSON header | payloads

The JSON header holds the object kind, step, config snapshot, scalar state and
an entry table of (name, shape, dtype, offset, nbytes). Payloads are raw
little-endian float32 arrays laid out back to back in table order.
"""

import json
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

from .errors import (CheckpointError, CheckpointMagicError, CheckpointShapeTableError,
                     CheckpointTruncatedError, CheckpointVersionError)

logger = logging.getLogger(__name__)

MAGIC = b"RGAN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class CheckpointData:
    kind: str
    step: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    scalars: Dict[str, Any] = field(default_factory=dict)
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def write_checkpoint(path: str, data: CheckpointData) -> str:
    """
    Serialize `data` to `path` atomically (temp file in the same directory, then rename).

    Returns:
        The path written
    """
    entries = []
    payloads = []
    offset = 0
    for name, array in data.arrays.items():
        array = np.asarray(array)
        if array.dtype != np.float32:
            raise CheckpointError(f"entry '{name}' has dtype {array.dtype}; only float32 payloads are stored")
        blob = np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(blob)})
        payloads.append(blob)
        offset += len(blob)

    header = json.dumps({"kind": data.kind, "step": int(data.step), "config": data.config,
                         "scalars": data.scalars, "entries": entries},
                        ensure_ascii=False, sort_keys=False).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(prefix=".rgan-", dir=directory)
        with os.fdopen(fd, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
            f.write(header)
            for blob in payloads:
                f.write(blob)
        os.replace(tmp_path, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Wrote {data.kind} checkpoint with {len(entries)} entries to {path}")
    return path


def read_checkpoint(path: str) -> CheckpointData:
    """Parse a checkpoint file, reporting magic, version, truncation and table errors distinctly."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if raw[:len(MAGIC)] != MAGIC:
        if len(raw) < len(MAGIC) and MAGIC.startswith(raw):
            raise CheckpointTruncatedError(f"{path}: file ends inside the magic")
        raise CheckpointMagicError(f"{path}: not a RetinaGAN checkpoint (magic {raw[:4]!r})")
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file ends inside the fixed prefix")
    _, version, header_len = _PREFIX.unpack_from(raw, 0)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version} is not supported "
                                     f"(expected {FORMAT_VERSION})")
    header_end = _PREFIX.size + header_len
    if len(raw) < header_end:
        raise CheckpointTruncatedError(f"{path}: header needs {header_len} bytes, "
                                       f"{len(raw) - _PREFIX.size} present")
    try:
        header = json.loads(raw[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointShapeTableError(f"{path}: header is not valid JSON ({e})") from e

    payload = memoryview(raw)[header_end:]
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    expected_offset = 0
    for entry in header.get("entries", []):
        try:
            name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
            dtype, offset, nbytes = entry["dtype"], int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointShapeTableError(f"{path}: malformed entry {entry!r}") from e
        if dtype != "float32":
            raise CheckpointShapeTableError(f"{path}: entry '{name}' has unsupported dtype {dtype}")
        if offset != expected_offset or nbytes != int(np.prod(shape, dtype=np.int64)) * 4:
            raise CheckpointShapeTableError(f"{path}: entry '{name}' shape {shape} disagrees with "
                                            f"offset {offset} / nbytes {nbytes}")
        if name in arrays:
            raise CheckpointShapeTableError(f"{path}: entry '{name}' appears twice")
        if offset + nbytes > len(payload):
            raise CheckpointTruncatedError(f"{path}: payload of '{name}' ends at byte {offset + nbytes}, "
                                           f"file holds {len(payload)}")
        arrays[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=_PAYLOAD_DTYPE) \
            .reshape(shape).astype(np.float32)
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise CheckpointShapeTableError(f"{path}: {len(payload) - expected_offset} trailing payload bytes "
                                        f"not covered by the entry table")

    return CheckpointData(kind=header.get("kind", ""), step=int(header.get("step", 0)),
                          config=header.get("config", {}), scalars=header.get("scalars", {}),
                          arrays=arrays)
