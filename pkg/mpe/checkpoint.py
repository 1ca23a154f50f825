"""
Versioned binary checkpoints.

Layout: the 8-byte magic `MPECKPT1`, a little-endian `(version, header_length)`
pair of uint32, a UTF-8 JSON header (metadata plus an index of arrays), then
the raw little-endian array bytes in index order. Arrays are written in
sorted name order and the header is serialized with sorted keys, so
identical states produce identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict

from mpe.errors import FormatError

CHECKPOINT_MAGIC = b"MPECKPT1"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<II")


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    meta: dict[str, Any]
    arrays: dict[str, np.ndarray]

    @property
    def catalog_hash(self) -> str | None:
        return self.meta.get("catalog_hash")

    @property
    def phase(self) -> str | None:
        return self.meta.get("phase")

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays whose name starts with `prefix`, with the prefix stripped."""
        return {name[len(prefix):]: array for name, array in self.arrays.items() if name.startswith(prefix)}

    def to_bytes(self) -> bytes:
        index = []
        blobs = []
        offset = 0
        for name in sorted(self.arrays):
            array = np.ascontiguousarray(self.arrays[name])
            array = array.astype(array.dtype.newbyteorder("<"), copy=False)
            blob = array.tobytes()
            index.append({"name": name, "dtype": array.dtype.str, "shape": list(array.shape), "offset": offset})
            blobs.append(blob)
            offset += len(blob)
        header = json.dumps({"meta": self.meta, "arrays": index}, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return CHECKPOINT_MAGIC + _PREAMBLE.pack(CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)

    @staticmethod
    def from_bytes(data: bytes) -> Checkpoint:
        if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        start = len(CHECKPOINT_MAGIC)
        if len(data) < start + _PREAMBLE.size:
            raise FormatError("truncated checkpoint")
        version, header_length = _PREAMBLE.unpack_from(data, start)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        start += _PREAMBLE.size
        try:
            header = json.loads(data[start : start + header_length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"corrupt checkpoint header: {e}") from e
        body = memoryview(data)[start + header_length :]

        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64))
            end = entry["offset"] + count * dtype.itemsize
            if end > len(body):
                raise FormatError(f"array {entry['name']} runs past the end of the checkpoint")
            arrays[entry["name"]] = (
                np.frombuffer(body[entry["offset"] : end], dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
            )
        return Checkpoint(meta=header["meta"], arrays=arrays)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @staticmethod
    def load(path: str | Path) -> Checkpoint:
        return Checkpoint.from_bytes(Path(path).read_bytes())
