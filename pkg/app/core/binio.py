"""Binary container shared by model files and the tensor cache.

Layout (all integers little-endian):

    magic        8 bytes   b"FLTWATCH"
    version      uint32
    header_len   uint32
    header       header_len bytes of JSON (sorted keys), with a "tensors" list of
                 {"name": str, "shape": [int, ...]} in payload order
    payload      float64 '<f8' values of each tensor, C order, concatenated
"""
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple
import struct

import numpy as np
import orjson

from app.core.errors import ModelFormatError

MAGIC = b"FLTWATCH"
_PREFIX = struct.Struct("<8sII")


def pack(version: int, header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    meta = dict(header)
    meta["tensors"] = [{"name": name, "shape": list(np.shape(arr))} for name, arr in tensors.items()]
    head = orjson.dumps(meta, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in tensors.values())
    return _PREFIX.pack(MAGIC, version, len(head)) + head + payload


def unpack(blob: bytes, expected_version: int) -> Tuple[Dict[str, Any], "OrderedDict[str, np.ndarray]"]:
    if len(blob) < _PREFIX.size:
        raise ModelFormatError("file too short for a container header")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != expected_version:
        raise ModelFormatError(f"format version {version}, expected {expected_version}")
    start = _PREFIX.size
    try:
        header = orjson.loads(blob[start : start + head_len])
    except orjson.JSONDecodeError as e:
        raise ModelFormatError(f"unreadable header: {e}") from e

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = start + head_len
    for entry in header.pop("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise ModelFormatError(f"payload truncated in tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise ModelFormatError(f"{len(blob) - offset} trailing bytes after payload")
    return header, tensors


def write_container(path: Path, version: int, header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pack(version, header, tensors))


def read_container(path: Path, expected_version: int) -> Tuple[Dict[str, Any], "OrderedDict[str, np.ndarray]"]:
    return unpack(Path(path).read_bytes(), expected_version)
