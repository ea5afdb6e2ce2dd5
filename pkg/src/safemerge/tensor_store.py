"""Checkpoint container and a safetensors-compatible F32 reader/writer."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

_HEADER_LEN = struct.Struct("<Q")
_METADATA_KEY = "__metadata__"


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file does not match the expected layout."""


class NonFiniteError(ValueError):
    pass


def _as_tensor(name: str, value, allow_nonfinite: bool) -> np.ndarray:
    arr = np.array(value, dtype=np.float32, copy=True, order="C")
    if not allow_nonfinite and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"tensor {name!r} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Checkpoint:
    """Immutable map of tensor name to float32 array, kept in sorted name order."""

    tensors: Mapping[str, np.ndarray]
    metadata: Mapping[str, str] = field(default_factory=dict)
    allow_nonfinite: bool = False

    def __post_init__(self) -> None:
        tensors = {}
        for name in sorted(self.tensors):
            if not isinstance(name, str):
                raise TypeError(f"tensor names must be str, got {type(name).__name__}")
            tensors[name] = _as_tensor(name, self.tensors[name], self.allow_nonfinite)
        meta = {}
        for k, v in sorted(dict(self.metadata).items()):
            if not isinstance(k, str) or not isinstance(v, str):
                raise TypeError("metadata must map str to str")
            meta[k] = v
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "metadata", meta)

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def num_params(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise equality of all tensors and metadata."""
        if self.names() != other.names() or self.metadata != other.metadata:
            return False
        for name, t in self.tensors.items():
            o = other.tensors[name]
            if t.shape != o.shape or t.tobytes() != o.tobytes():
                return False
        return True


@dataclass(frozen=True)
class CompatReport:
    compatible: bool
    mismatches: list[tuple[str, str]]


def validate_compat(a: Checkpoint, b: Checkpoint) -> CompatReport:
    mismatches: list[tuple[str, str]] = []
    for name in sorted(set(a.tensors) | set(b.tensors)):
        if name not in a.tensors:
            mismatches.append((name, "missing-in-a"))
        elif name not in b.tensors:
            mismatches.append((name, "missing-in-b"))
        elif a.tensors[name].shape != b.tensors[name].shape:
            mismatches.append((name, "shape-mismatch"))
    return CompatReport(compatible=not mismatches, mismatches=mismatches)


def to_bytes(ckpt: Checkpoint) -> bytes:
    header: dict = {}
    if ckpt.metadata:
        header[_METADATA_KEY] = dict(ckpt.metadata)
    chunks = []
    offset = 0
    for name, t in ckpt.tensors.items():
        if not ckpt.allow_nonfinite and not np.all(np.isfinite(t)):
            raise NonFiniteError(f"tensor {name!r} contains NaN or Inf")
        raw = t.astype("<f4", copy=False).tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(t.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    # pad to 8-byte alignment like the reference safetensors writer
    blob += b" " * (-len(blob) % 8)
    return _HEADER_LEN.pack(len(blob)) + blob + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def from_bytes(buf: bytes, allow_nonfinite: bool = False) -> Checkpoint:
    if len(buf) < 8:
        raise CheckpointFormatError("file shorter than the 8-byte header length field")
    (hlen,) = _HEADER_LEN.unpack_from(buf, 0)
    if hlen > len(buf) - 8:
        raise CheckpointFormatError(
            f"header length {hlen} exceeds file size {len(buf)}"
        )
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"malformed JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointFormatError("header must be a JSON object")

    metadata = header.pop(_METADATA_KEY, {}) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise CheckpointFormatError("__metadata__ must be a string-to-string map")

    data = memoryview(buf)[8 + hlen :]
    tensors = {}
    expected_begin = 0
    for name in sorted(header):
        entry = header[name]
        if not isinstance(entry, dict):
            raise CheckpointFormatError(f"entry for {name!r} is not an object")
        dtype = entry.get("dtype")
        if dtype != "F32":
            raise CheckpointFormatError(
                f"tensor {name!r} has dtype {dtype!r}; only F32 is supported"
            )
        shape = entry.get("shape")
        offsets = entry.get("data_offsets")
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
        ):
            raise CheckpointFormatError(f"tensor {name!r} has invalid shape {shape!r}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
        ):
            raise CheckpointFormatError(f"tensor {name!r} has invalid data_offsets")
        begin, end = offsets
        if begin < expected_begin:
            raise CheckpointFormatError(
                f"tensor {name!r} data_offsets overlap the previous tensor"
            )
        if begin != expected_begin:
            raise CheckpointFormatError(
                f"tensor {name!r} data is not tightly packed (gap at {expected_begin})"
            )
        if end < begin or end > len(data):
            raise CheckpointFormatError(f"tensor {name!r} data_offsets out of bounds")
        if end - begin != 4 * math.prod(shape):
            raise CheckpointFormatError(
                f"tensor {name!r}: {end - begin} bytes for shape {shape}"
            )
        arr = np.frombuffer(data[begin:end], dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = arr
        expected_begin = end
    if expected_begin != len(data):
        raise CheckpointFormatError("trailing bytes after the last tensor")
    try:
        return Checkpoint(tensors, metadata, allow_nonfinite=allow_nonfinite)
    except NonFiniteError as exc:
        raise CheckpointFormatError(str(exc)) from exc


def load_checkpoint(path: str | Path, allow_nonfinite: bool = False) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), allow_nonfinite=allow_nonfinite)
