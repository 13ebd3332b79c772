""" On-disk datasets.

A dataset directory holds one file per sample array and a manifest:

    manifest.txt               '# gaflow dataset samples=N height=H width=W'
                               followed by one 'relative_path role' per line
    00000_cloth.ppm            I_p          binary PPM (P6), 8 bit
    00000_cloth_mask.pgm       M_p          binary PGM (P5), 0 / 255
    00000_model.ppm            I_m
    00000_garment_mask.pgm     M_m_gt
    00000_clothing_labels.pgm  M_s_gt       class indices
    00000_bodypart_labels.pgm  M_bp_gt      class indices
    00000_priors.zfpl          I_priors     raw float32 planes
    00000_uv.zfpl              I_uv
    00000_flow.zfpl            gt_flow      (only when present)

ZFPL planes: 16-byte header (magic b"ZFPL", then C, H, W as little-endian
u32) followed by C * H * W little-endian float32 values.
"""
from __future__ import annotations

import logging
import os
import re
import struct
import typing

import numpy as np

from .constants import CHANNELS_BODYPART, CHANNELS_CLOTHING
from .errors import FormatError
from .sample import TryOnSample, check_sample

MANIFEST = "manifest.txt"
ZFPL_MAGIC = b"ZFPL"
ZFPL_HEADER = struct.Struct("<4sIII")

# role -> (sample field, file suffix, kind)
ROLES: dict[str, tuple[str, str, str]] = dict(cloth=("I_p", "ppm", "image"),
                                              cloth_mask=("M_p", "pgm", "mask"),
                                              model=("I_m", "ppm", "image"),
                                              garment_mask=("M_m_gt", "pgm", "mask"),
                                              clothing_labels=("M_s_gt", "pgm", "labels"),
                                              bodypart_labels=("M_bp_gt", "pgm", "labels"),
                                              priors=("I_priors", "zfpl", "planes"),
                                              uv=("I_uv", "zfpl", "planes"),
                                              flow=("gt_flow", "zfpl", "planes"))

LABEL_CLASSES = dict(M_s_gt=CHANNELS_CLOTHING, M_bp_gt=CHANNELS_BODYPART)


def to_bytes8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def from_bytes8(b: np.ndarray) -> np.ndarray:
    return (b.astype(np.float64) / 255).astype(np.float32)


def encode_pnm(image: np.ndarray) -> bytes:
    """ C x H x W uint8 (C = 1 or 3) -> P5 / P6 bytes. """
    c, h, w = image.shape
    magic = {1: b"P5", 3: b"P6"}[c]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes()


def decode_pnm(buffer: bytes, path: str = "") -> np.ndarray:
    """ P5 / P6 bytes -> C x H x W uint8. """
    if buffer[:2] not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM file", 0, path)
    channels = 1 if buffer[:2] == b"P5" else 3
    tokens = []
    offset = 2
    while len(tokens) < 3:
        while offset < len(buffer) and buffer[offset:offset + 1].isspace():
            offset += 1
        if offset < len(buffer) and buffer[offset:offset + 1] == b"#":
            end = buffer.find(b"\n", offset)
            if end < 0:
                raise FormatError("truncated header comment", offset, path)
            offset = end + 1
            continue
        start = offset
        while offset < len(buffer) and buffer[offset:offset + 1].isdigit():
            offset += 1
        if start == offset:
            raise FormatError("malformed header field", start, path)
        tokens.append(int(buffer[start:offset]))
    if offset >= len(buffer) or not buffer[offset:offset + 1].isspace():
        raise FormatError("header not terminated by whitespace", offset, path)
    offset += 1
    w, h, maxval = tokens
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"unsupported size {w} x {h} or maxval {maxval}", offset, path)
    size = w * h * channels
    if len(buffer) - offset < size:
        raise FormatError(f"truncated pixel data, {len(buffer) - offset} of {size} bytes", len(buffer), path)
    if len(buffer) - offset > size:
        raise FormatError("trailing bytes after pixel data", offset + size, path)
    data = np.frombuffer(buffer, dtype=np.uint8, count=size, offset=offset)
    return data.reshape(h, w, channels).transpose(2, 0, 1).copy()


def encode_planes(planes: np.ndarray) -> bytes:
    c, h, w = planes.shape
    return ZFPL_HEADER.pack(ZFPL_MAGIC, c, h, w) + np.ascontiguousarray(planes, dtype="<f4").tobytes()


def decode_planes(buffer: bytes, path: str = "") -> np.ndarray:
    if len(buffer) < ZFPL_HEADER.size:
        raise FormatError("truncated ZFPL header", len(buffer), path)
    magic, c, h, w = ZFPL_HEADER.unpack_from(buffer)
    if magic != ZFPL_MAGIC:
        raise FormatError("bad magic, not a ZFPL file", 0, path)
    size = 4 * c * h * w
    body = len(buffer) - ZFPL_HEADER.size
    if body < size:
        raise FormatError(f"truncated plane data, {body} of {size} bytes", len(buffer), path)
    if body > size:
        raise FormatError("trailing bytes after plane data", ZFPL_HEADER.size + size, path)
    data = np.frombuffer(buffer, dtype="<f4", count=c * h * w, offset=ZFPL_HEADER.size)
    return data.reshape(c, h, w).astype(np.float32)


def _read(path: str) -> bytes:
    with open(path, "rb") as fp:
        return fp.read()


def _write(path: str, data: bytes) -> None:
    with open(path, "wb") as fp:
        fp.write(data)


def encode_array(name: str, kind: str, value: np.ndarray) -> bytes:
    if kind in ("image", "mask"):
        return encode_pnm(to_bytes8(value))
    if kind == "labels":
        return encode_pnm(value.argmax(axis=0).astype(np.uint8)[None])
    return encode_planes(value)


def decode_array(name: str, kind: str, buffer: bytes, path: str) -> np.ndarray:
    if kind in ("image", "mask"):
        return from_bytes8(decode_pnm(buffer, path))
    if kind == "labels":
        labels = decode_pnm(buffer, path)[0]
        classes = LABEL_CLASSES[name]
        if labels.max() >= classes:
            raise FormatError(f"class index {labels.max()} out of range for {classes} classes", 0, path)
        return (labels[None] == np.arange(classes).reshape(-1, 1, 1)).astype(np.float32)
    return decode_planes(buffer, path)


def save_dataset(directory: str, samples: typing.Sequence[TryOnSample]) -> str:
    """ Write samples and their manifest; returns the manifest path. """
    os.makedirs(directory, exist_ok=True)
    h, w = samples[0].extent if samples else (0, 0)
    lines = [f"# gaflow dataset samples={len(samples)} height={h} width={w}"]
    for index, sample in enumerate(samples):
        for role, (name, suffix, kind) in ROLES.items():
            value = getattr(sample, name)
            if value is None:
                continue
            filename = f"{index:05d}_{role}.{suffix}"
            _write(os.path.join(directory, filename), encode_array(name, kind, value))
            lines.append(f"{filename} {role}")
    path = os.path.join(directory, MANIFEST)
    with open(path, "w") as fp:
        fp.write("\n".join(lines) + "\n")
    logger.info(f"Wrote {len(samples)} samples to {directory}.")
    return path


def read_manifest(directory: str) -> tuple[int, dict[int, dict[str, str]]]:
    """ Parse the manifest into the declared sample count and index -> role -> path. """
    path = os.path.join(directory, MANIFEST)
    with open(path, "r") as fp:
        text = fp.read()
    declared = None
    entries: dict[int, dict[str, str]] = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped.startswith("#"):
            m = re.search(r"samples=(\d+)", stripped)
            if m:
                declared = int(m.group(1))
        elif stripped:
            parts = stripped.split()
            m = re.match(r"(\d+)_", parts[0])
            if len(parts) != 2 or parts[1] not in ROLES or m is None:
                raise FormatError(f"malformed manifest line {stripped!r}", offset, path)
            entries.setdefault(int(m.group(1)), {})[parts[1]] = parts[0]
        offset += len(line.encode("utf-8"))
    if declared is None:
        raise FormatError("manifest lacks the 'samples=N' header", 0, path)
    if declared != len(entries):
        raise FormatError(f"manifest declares {declared} samples but lists {len(entries)}", offset, path)
    return declared, entries


def load_dataset(directory: str) -> list[TryOnSample]:
    _, entries = read_manifest(directory)
    samples = []
    for index in sorted(entries):
        missing = [r for r in ROLES if r != "flow" and r not in entries[index]]
        if missing:
            raise FormatError(f"sample {index} lacks {', '.join(missing)} in the manifest", 0,
                              os.path.join(directory, MANIFEST))
        arrays = {}
        for role, filename in entries[index].items():
            name, _, kind = ROLES[role]
            path = os.path.join(directory, filename)
            arrays[name] = decode_array(name, kind, _read(path), path)
        samples.append(check_sample(TryOnSample(**arrays)))
    logger.debug(f"Loaded {len(samples)} samples from {directory}.")
    return samples


def save_splits(root: str, train: typing.Sequence[TryOnSample], val: typing.Sequence[TryOnSample]) -> None:
    save_dataset(os.path.join(root, "train"), train)
    if val:
        save_dataset(os.path.join(root, "val"), val)


def load_splits(root: str) -> tuple[list[TryOnSample], list[TryOnSample]]:
    train = load_dataset(os.path.join(root, "train"))
    val_dir = os.path.join(root, "val")
    val = load_dataset(val_dir) if os.path.exists(os.path.join(val_dir, MANIFEST)) else []
    return train, val


logger = logging.getLogger(__name__)
