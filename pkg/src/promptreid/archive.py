"""Named-tensor archive: one file holding a manifest plus raw buffers.

Layout: 4-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then the concatenated raw little-endian buffers. The manifest lists
(name, shape, dtype, offset, nbytes) per tensor, offsets relative to the start
of the payload. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import ParseError

_MAGIC = b"NTA1"


def save_archive(path, tensors) -> None:
    """Write a mapping of name -> ndarray to ``path``."""
    entries = []
    payload = []
    offset = 0
    for name, array in dict(tensors).items():
        array = np.ascontiguousarray(array)
        if array.dtype.byteorder == ">":
            array = array.astype(array.dtype.newbyteorder("<"))
        raw = array.tobytes()
        entries.append(
            {
                "name": str(name),
                "shape": list(array.shape),
                "dtype": array.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payload.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(manifest)))
            fh.write(manifest)
            for raw in payload:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ParseError(f"{path}: not a tensor archive")
        (manifest_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        payload = fh.read()
    result = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        expected = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if entry["nbytes"] != expected:
            raise ParseError(f"{path}: tensor {entry['name']!r} has inconsistent size")
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ParseError(f"{path}: truncated buffer for {entry['name']!r}")
        result[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return result
