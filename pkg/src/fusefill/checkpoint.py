"""Versioned binary checkpoint format.

Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header,
then the raw bytes of every tensor in header order. Identical state always
serializes to identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FUSEFIL1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(obj, blobs: list):
    if isinstance(obj, torch.Tensor):
        arr = obj.detach().cpu().contiguous().numpy()
        blobs.append(arr.tobytes())
        return {"__tensor__": len(blobs) - 1, "dtype": str(arr.dtype), "shape": list(arr.shape)}
    if isinstance(obj, dict):
        return {"__dict__": [[k, _encode(v, blobs)] for k, v in obj.items()],
                "ordered": isinstance(obj, OrderedDict)}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(v, blobs) for v in obj]}
    if isinstance(obj, list):
        return [_encode(v, blobs) for v in obj]
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _decode(obj, blobs):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            arr = np.frombuffer(blobs[obj["__tensor__"]], dtype=np.dtype(obj["dtype"]))
            return torch.from_numpy(arr.reshape(obj["shape"]).copy())
        if "__tuple__" in obj:
            return tuple(_decode(v, blobs) for v in obj["__tuple__"])
        items = [(k, _decode(v, blobs)) for k, v in obj["__dict__"]]
        return OrderedDict(items) if obj.get("ordered") else dict(items)
    if isinstance(obj, list):
        return [_decode(v, blobs) for v in obj]
    return obj


def dumps(payload: dict) -> bytes:
    blobs: list[bytes] = []
    tree = _encode(payload, blobs)
    header = {"version": FORMAT_VERSION, "sizes": [len(b) for b in blobs], "tree": tree}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def loads(data: bytes) -> dict:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    if header["version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header['version']}")
    blobs, pos = [], 16 + n
    for size in header["sizes"]:
        blobs.append(data[pos:pos + size])
        pos += size
    if pos != len(data):
        raise CheckpointError("truncated or oversized checkpoint")
    return _decode(header["tree"], blobs)


def save(payload: dict, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(payload))
    os.replace(tmp, path)
    return path


def load(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return loads(path.read_bytes())
