"""File formats: FTNS binary tensors, binary PPM/PGM images, JSON manifests."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FTNS_MAGIC = b"FTNS"
FTNS_VERSION = 1
# 0 is the 32-bit real payload; 1 carries exact integer labels.
FTNS_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


class FormatError(ValueError):
    pass


def write_ftns(path, array):
    array = np.asarray(array)
    if np.issubdtype(array.dtype, np.floating):
        code = 0
    elif np.issubdtype(array.dtype, np.integer) or array.dtype == bool:
        code = 1
    else:
        raise FormatError(f"unsupported dtype {array.dtype}")
    payload = np.asarray(array, dtype=FTNS_DTYPES[code], order="C")
    header = FTNS_MAGIC + struct.pack("<BBB", FTNS_VERSION, code, payload.ndim)
    header += struct.pack(f"<{payload.ndim}I", *payload.shape)
    Path(path).write_bytes(header + payload.tobytes())


def read_ftns(path):
    data = Path(path).read_bytes()
    if data[:4] != FTNS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, code, ndim = struct.unpack_from("<BBB", data, 4)
    if version != FTNS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in FTNS_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", data, 7)
    offset = 7 + 4 * ndim
    dt = FTNS_DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    if len(data) - offset != count * dt.itemsize:
        raise FormatError(f"{path}: payload length does not match shape {shape}")
    arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def _read_netpbm(path, magic):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic!r}, got {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit images are supported")
    return data[pos + 1:], width, height, maxval


def read_ppm(path):
    """Read a binary P6 image as float32 (H, W, 3) in [0, 1]."""
    payload, w, h, maxval = _read_netpbm(path, b"P6")
    img = np.frombuffer(payload, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return img.astype(np.float32) / maxval


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """Write a float image in [0, 1] (or uint8) as binary P6."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_uint8(image)
    h, w = image.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image).tobytes())


def read_pgm(path):
    payload, w, h, _ = _read_netpbm(path, b"P5")
    return np.frombuffer(payload, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def write_pgm(path, gray):
    gray = np.asarray(gray)
    if gray.dtype == bool:
        gray = gray.astype(np.uint8) * 255
    gray = gray.astype(np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray).tobytes())


def read_mask(path):
    return read_pgm(path) > 127


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def config_hash(obj):
    """Short stable hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
