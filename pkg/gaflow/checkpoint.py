""" ZFLW checkpoint files.

Layout (little-endian):

    magic      4 bytes   b"ZFLW"
    version    u32       1
    count      u32       number of tensors
    per tensor:
        name length  u16, followed by the UTF-8 name
        rank         u8, followed by rank u32 extents
        data         float32, product(extents) values

Optimizer moments are stored as ordinary tensors named "<name>.m1" and
"<name>.m2".
"""
from __future__ import annotations

import logging
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"ZFLW"
VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(buffer: bytes, path: str = "") -> dict[str, np.ndarray]:
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(buffer):
            raise FormatError(f"truncated checkpoint while reading {what}", offset, path)
        chunk = buffer[offset:offset + n]
        offset += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a ZFLW checkpoint", 0, path)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", take(2, "name length"))
        start = offset
        try:
            name = take(length, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start, path)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(shape).astype(np.float32)
    if offset != len(buffer):
        raise FormatError("trailing bytes after last tensor", offset, path)
    return tensors


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fp:
        fp.write(encode_checkpoint(tensors))
    logger.debug(f"Wrote {len(tensors)} tensors to {path}.")


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fp:
        buffer = fp.read()
    return decode_checkpoint(buffer, path)


logger = logging.getLogger(__name__)
