"""Readers and writers for the image, point-cloud and tensor files the CLI emits."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, FormatError, TruncatedPayload

LTNT_MAGIC = b"LTNT"
_LTNT_HEADER = struct.Struct("<4s4I")

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


# ----------------------------------------------------------------------------- PFM


def encode_pfm(image: np.ndarray) -> bytes:
    """Grayscale little-endian PFM; rows are stored bottom to top."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise FormatError(f"PFM writer expects a 2-D array, got shape {image.shape}")
    h, w = image.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(image[::-1]).tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    m = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if m is None:
        raise BadMagic("not a PFM file")
    channels = 1 if m.group(1) == b"Pf" else 3
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * channels
    payload = data[m.end():]
    if len(payload) < 4 * n:
        raise TruncatedPayload(f"PFM payload has {len(payload)} bytes, expected {4 * n}")
    arr = np.frombuffer(payload[: 4 * n], dtype=dtype).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return arr.reshape(shape)[::-1].copy()


# ----------------------------------------------------------------------------- PGM


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"PGM writer expects a 2-D array, got shape {image.shape}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.astype(np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise BadMagic("not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise FormatError("only 8-bit PGM is supported")
    payload = data[m.end():]
    if len(payload) < w * h:
        raise TruncatedPayload(f"PGM payload has {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload[: w * h], dtype=np.uint8).reshape(h, w).copy()


# ----------------------------------------------------------------------------- PLY


def encode_ply(vertices: np.ndarray) -> bytes:
    """Binary little-endian PLY with a single ``vertex`` element.

    ``vertices`` is a structured array; its field order and types become the
    property list.
    """
    vertices = np.asarray(vertices)
    if vertices.dtype.names is None:
        raise FormatError("PLY writer expects a structured array")
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(vertices)}"]
    fields = []
    for name in vertices.dtype.names:
        base = vertices.dtype[name].base
        code = base.kind + str(base.itemsize)
        lines.append(f"property {_PLY_NAMES[code]} {name}")
        fields.append((name, "<" + code))
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    packed = np.empty(len(vertices), dtype=fields)
    for name in vertices.dtype.names:
        packed[name] = vertices[name]
    return header + packed.tobytes()


def decode_ply(data: bytes) -> np.ndarray:
    """Read the ``vertex`` element of a binary little-endian PLY file."""
    if not data.startswith(b"ply"):
        raise BadMagic("not a PLY file")
    end = data.find(b"end_header")
    if end < 0:
        raise FormatError("PLY header is not terminated")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                raise FormatError("PLY list properties are not supported")
            if parts[1] not in _PLY_TYPES:
                raise FormatError(f"unknown PLY property type {parts[1]!r}")
            elements[-1][2].append((parts[2], "<" + _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(f"unsupported PLY format {fmt!r}")
    offset = body_start
    for name, count, props in elements:
        dtype = np.dtype(props)
        size = dtype.itemsize * count
        if len(data) < offset + size:
            raise TruncatedPayload(f"PLY element {name!r} needs {size} bytes")
        if name == "vertex":
            return np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()
        offset += size
    raise FormatError("PLY file has no vertex element")


# ----------------------------------------------------------------------------- latent tensors


def encode_latent(values: np.ndarray) -> bytes:
    """Raw f32 ``(T, C, h, w)`` tensor behind a 16-byte-plus-magic header."""
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 4:
        raise FormatError(f"latent must be (T, C, h, w), got shape {values.shape}")
    return _LTNT_HEADER.pack(LTNT_MAGIC, *values.shape) + values.tobytes()


def decode_latent(data: bytes) -> np.ndarray:
    if data[:4] != LTNT_MAGIC:
        raise BadMagic(f"expected magic {LTNT_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _LTNT_HEADER.size:
        raise TruncatedPayload("latent header truncated")
    _, t, c, h, w = _LTNT_HEADER.unpack_from(data)
    n = t * c * h * w
    payload = data[_LTNT_HEADER.size:]
    if len(payload) != 4 * n:
        raise TruncatedPayload(f"latent payload has {len(payload)} bytes, expected {4 * n}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, c, h, w).copy()


def read_bytes(path) -> bytes:
    return Path(path).read_bytes()
