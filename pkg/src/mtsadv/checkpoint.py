"""Versioned binary container of named float64 tensors.

Layout (all integers little-endian)::

    magic        8 bytes  b"MTSADVCK"
    version      u32
    header_len   u32      length of the UTF-8 JSON header that follows
    header       JSON     canonical: sorted keys, no whitespace
    n_tensors    u32
    per tensor:
        name_len u16, name (UTF-8)
        rank     u32
        dims     rank x u64
        values   prod(dims) x f64, row-major

The header of a model checkpoint holds ``{"kind": "model", "architecture":
..., "metadata": ...}``; other containers (adversarial batches) use their
own ``kind``.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .models import ArchitectureSpec, Module, build

MAGIC = b"MTSADVCK"
VERSION = 1

__all__ = [
    "CheckpointError",
    "CorruptCheckpointError",
    "UnsupportedVersionError",
    "CheckpointShapeError",
    "write_container",
    "read_container",
    "save_checkpoint",
    "load_checkpoint",
    "load_weights",
]


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_container(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    h = canonical_json(header)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(h)))
    buf.write(h)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_container(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CorruptCheckpointError("container truncated")
        out = struct.unpack_from(fmt, raw, pos)
        pos += size
        return out

    if raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("bad magic: not a checkpoint container")
    pos = len(MAGIC)
    version, hlen = take("<II")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    if pos + hlen > len(raw):
        raise CorruptCheckpointError("container truncated in header")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from None
    pos += hlen
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(raw):
            raise CorruptCheckpointError("container truncated in tensor name")
        name = raw[pos:pos + nlen].decode("utf-8", errors="strict")
        pos += nlen
        if name in tensors:
            raise CorruptCheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = take("<I")
        dims = take(f"<{rank}Q")
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise CorruptCheckpointError(f"container truncated in tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise CorruptCheckpointError(f"{len(raw) - pos} trailing bytes after last tensor")
    return header, tensors


def write_container(sink: BinaryIO | str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    payload = encode_container(header, tensors)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(payload)
    else:
        sink.write(payload)


def read_container(source: BinaryIO | str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(source).read_bytes() if isinstance(source, (str, Path)) else source.read()
    return decode_container(raw)


def _jsonable(meta: dict) -> dict:
    out = {}
    for k, v in meta.items():
        if isinstance(v, np.generic):
            v = v.item()
        out[k] = v
    return out


def save_checkpoint(model: Module, sink: BinaryIO | str | Path) -> None:
    header = {
        "kind": "model",
        "architecture": model.spec.to_dict(),
        "metadata": _jsonable(model.metadata),
    }
    write_container(sink, header, model.state())


def load_checkpoint(source: BinaryIO | str | Path, expect_kind: str | None = None) -> Module:
    """Rebuild a model from a container, validating every tensor shape.

    ``expect_kind`` rejects a checkpoint of another architecture; a tensor
    set that does not match the architecture raises
    :class:`CheckpointShapeError`.
    """
    header, tensors = read_container(source)
    if header.get("kind") != "model" or "architecture" not in header:
        raise CorruptCheckpointError("container does not hold a model")
    try:
        spec = ArchitectureSpec(**header["architecture"])
    except (TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"bad architecture record: {exc}") from None
    if expect_kind is not None and spec.kind != expect_kind:
        raise CheckpointShapeError(f"checkpoint holds a {spec.kind!r} model, expected {expect_kind!r}")
    model = build(spec)
    reference = model.state()
    if list(reference) != list(tensors):
        raise CheckpointShapeError(
            f"tensor names {sorted(set(tensors) ^ set(reference))} do not match architecture {spec.kind}"
        )
    for name, arr in tensors.items():
        if arr.shape != reference[name].shape:
            raise CheckpointShapeError(f"tensor {name!r} has shape {arr.shape}, expected {reference[name].shape}")
    model.load_state(tensors)
    model.metadata = dict(header.get("metadata", {}))
    return model


def load_weights(model: Module, source: BinaryIO | str | Path) -> Module:
    """Load a checkpoint's tensors into an already built ``model``.

    Names and shapes must match the model exactly, so loading e.g. an FCN
    checkpoint into a LeNet-5 student raises :class:`CheckpointShapeError`.
    """
    header, tensors = read_container(source)
    if header.get("kind") != "model":
        raise CorruptCheckpointError("container does not hold a model")
    reference = model.state()
    if set(reference) != set(tensors):
        raise CheckpointShapeError(
            f"checkpoint tensors {sorted(set(tensors) ^ set(reference))} do not match the "
            f"{model.spec.kind} architecture"
        )
    for name, arr in tensors.items():
        if arr.shape != reference[name].shape:
            raise CheckpointShapeError(f"tensor {name!r} has shape {arr.shape}, expected {reference[name].shape}")
    model.load_state(tensors)
    return model
