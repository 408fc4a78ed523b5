"""Atomic file writes and the frame/depth binary formats."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

_DEPTH_HEADER = struct.Struct("<4sIII")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def ppm_bytes(image: np.ndarray) -> bytes:
    """Binary P6 with maxval 255 for an (H, W, 3) image in [0, 1]."""
    img = to_uint8(image)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError("expected a P6 PPM with maxval 255")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(data, np.uint8, count=w * h * 3, offset=pos + 1)
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


def depth_bytes(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth)
    h, w = depth.shape
    return _DEPTH_HEADER.pack(b"DPTH", w, h, 0) + depth.astype("<f4").tobytes()


def write_depth(path, depth: np.ndarray) -> None:
    atomic_write_bytes(path, depth_bytes(depth))


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h, _ = _DEPTH_HEADER.unpack_from(data)
    if magic != b"DPTH":
        raise ValueError("not a DPTH depth map")
    return np.frombuffer(data, "<f4", count=w * h, offset=_DEPTH_HEADER.size).reshape(h, w).astype(np.float64)
