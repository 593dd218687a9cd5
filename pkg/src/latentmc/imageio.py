"""Flat binary containers for images and sinograms, plus PGM import/export.

Container layout (little-endian throughout):

    bytes 0..7   magic ``LMCIMG01``
    bytes 8..11  u32 rows
    bytes 12..15 u32 cols
    then         rows*cols IEEE-754 float32, row-major

PGM (binary P5, maxval 255) is supported for eyeballing results; values are
scaled by 1/255 on read and clipped to [0, 1] on write.
"""

import os
import struct

import numpy as np

MAGIC = b"LMCIMG01"


class ContainerError(IOError):
    """Raised when a binary container is malformed."""


def write_array(path, values):
    """Write a 2D float array to the flat binary container."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {values.shape}")
    rows, cols = values.shape
    payload = values.astype("<f4").tobytes(order="C")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(payload)
    os.replace(tmp, path)


def read_array(path):
    """Read a 2D float array from the flat binary container."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise ContainerError(f"{path}: truncated header")
        rows, cols = struct.unpack("<II", header)
        payload = fh.read(4 * rows * cols)
        if len(payload) != 4 * rows * cols:
            raise ContainerError(f"{path}: truncated payload ({len(payload)} bytes for {rows}x{cols})")
        extra = fh.read(1)
        if extra:
            raise ContainerError(f"{path}: trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return values.reshape(rows, cols)


def write_pgm(path, values):
    """Write a [0,1]-valued 2D array as binary PGM (maxval 255)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {values.shape}")
    quantized = np.clip(np.rint(np.clip(values, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    rows, cols = values.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes(order="C"))
    os.replace(tmp, path)


def read_pgm(path):
    """Read a binary PGM (maxval 255) into a float array scaled by 1/255."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ContainerError(f"{path}: not a binary PGM (P5) file")
    # Header is whitespace-separated tokens, possibly with '#' comment lines.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ContainerError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    cols, rows, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ContainerError(f"{path}: unsupported maxval {maxval}, expected 255")
    payload = data[pos : pos + rows * cols]
    if len(payload) != rows * cols:
        raise ContainerError(f"{path}: truncated PGM payload")
    values = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return values.reshape(rows, cols)


def write_manifest(path, entries):
    """Write a key=value sidecar manifest (sorted keys, one per line)."""
    lines = [f"{key}={entries[key]}" for key in sorted(entries)]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path):
    """Read a key=value sidecar manifest into a dict of strings."""
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ContainerError(f"{path}: malformed manifest line {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries
