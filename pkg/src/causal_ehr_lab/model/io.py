"""Versioned flat parameter files.

Layout: 4-byte magic ``CELP``, uint32 format version, uint32 header length,
a UTF-8 JSON header (tensor manifest plus free-form metadata), then every
tensor's data as little-endian float32 in manifest order. All integers are
little-endian.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import ValidationError

MAGIC = b"CELP"
VERSION = 1
_DTYPE = np.dtype("<f4")


def dumps_params(states: dict[str, dict[str, torch.Tensor]], meta: dict | None = None) -> bytes:
    """Serialise named state dicts (e.g. one per fold) into one blob."""
    manifest, chunks = [], []
    for group in states:
        for name, tensor in states[group].items():
            arr = tensor.detach().cpu().numpy().astype(_DTYPE)
            manifest.append({"group": group, "name": name, "shape": list(arr.shape)})
            chunks.append(arr.tobytes(order="C"))
    header = json.dumps({"tensors": manifest, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def loads_params(blob: bytes) -> tuple[dict[str, dict[str, torch.Tensor]], dict]:
    if blob[:4] != MAGIC:
        raise ValidationError("not a parameter file (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValidationError(f"unsupported parameter file version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    states: dict[str, dict[str, torch.Tensor]] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * _DTYPE.itemsize
        if offset + nbytes > len(blob):
            raise ValidationError("parameter file truncated")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=offset).reshape(entry["shape"])
        states.setdefault(entry["group"], {})[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += nbytes
    if offset != len(blob):
        raise ValidationError("trailing bytes after parameter data")
    return states, header["meta"]


def save_params(path, states, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_params(states, meta))


def load_params(path):
    return loads_params(Path(path).read_bytes())
