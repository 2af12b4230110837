"""Semantic occupancy grids, BEV layouts and class-embedding fold/unfold.

Frame convention: x forward, y left, z up (meters). Grid index ``(i, j, k)``
runs along ``(x, y, z)`` and labels are stored with ``k`` innermost, so
``labels[i, j, k]`` of a C-ordered ``(H, W, D)`` array is the on-disk order.

Label 0 is free space, 255 is the unknown sentinel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagic,
    CodeOutOfPalette,
    DimMismatch,
    FormatError,
    IndexOutOfBounds,
    LabelOutOfRange,
    RegionOutOfBounds,
    TruncatedPayload,
    VersionUnsupported,
)

FREE = 0
UNKNOWN = 255
NUM_SEMANTIC_CLASSES = 17

# BEV layout palette. Codes index into this tuple.
LAYOUT_PALETTE = (
    "empty",
    "drivable_area",
    "lane_line",
    "road_divider",
    "crosswalk",
    "vehicle",
    "pedestrian",
    "obstacle",
)
LAYOUT_CODE = {name: code for code, name in enumerate(LAYOUT_PALETTE)}

SVO_MAGIC = b"SVOC"
BVL_MAGIC = b"BVLC"
CEMB_MAGIC = b"CEMB"
FORMAT_VERSION = 1

_SVO_HEADER = struct.Struct("<4sI3If3fI")
_BVL_HEADER = struct.Struct("<4sI2If2fI")
_CEMB_HEADER = struct.Struct("<4sIII")


def _as_f32(value) -> float:
    return float(np.float32(value))


@dataclass(frozen=True, eq=False)
class SemanticOccupancyGrid:
    """Dense ``H x W x D`` voxel labels with metric placement.

    ``voxel_size`` and ``origin`` are rounded to float32 on construction so
    that an in-memory grid and its decoded copy compare equal.
    """

    labels: np.ndarray
    voxel_size: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    num_classes: int = NUM_SEMANTIC_CLASSES

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.dtype != np.uint8 and raw.size and (raw.min() < 0 or raw.max() > UNKNOWN):
            raise LabelOutOfRange(f"labels must fit in 8 bits, got range [{raw.min()}, {raw.max()}]")
        labels = np.array(raw, dtype=np.uint8, order="C")
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise DimMismatch(f"labels must be a non-empty 3-D array, got shape {labels.shape}")
        if not self.voxel_size > 0:
            raise FormatError(f"voxel_size must be positive, got {self.voxel_size}")
        if not 1 <= int(self.num_classes) <= 255:
            raise FormatError(f"num_classes must be in [1, 255], got {self.num_classes}")
        bad = (labels >= self.num_classes) & (labels != UNKNOWN)
        if bad.any():
            idx = tuple(int(v) for v in np.argwhere(bad)[0])
            raise LabelOutOfRange(
                f"label {labels[idx]} at index {idx} exceeds num_classes={self.num_classes}"
            )
        labels.setflags(write=False)
        origin = tuple(_as_f32(v) for v in self.origin)
        if len(origin) != 3:
            raise DimMismatch("origin must have 3 components")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "voxel_size", _as_f32(self.voxel_size))
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    @property
    def occupied(self) -> np.ndarray:
        """Boolean mask of voxels holding a semantic class."""
        return (self.labels != FREE) & (self.labels != UNKNOWN)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin, dtype=np.float64)
        return lo, lo + np.asarray(self.dims, dtype=np.float64) * self.voxel_size

    def with_labels(self, labels: np.ndarray) -> "SemanticOccupancyGrid":
        return SemanticOccupancyGrid(labels, self.voxel_size, self.origin, self.num_classes)

    def __eq__(self, other):
        if not isinstance(other, SemanticOccupancyGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.voxel_size == other.voxel_size
            and self.origin == other.origin
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
        )

    def __hash__(self):
        return hash((self.dims, self.voxel_size, self.origin, self.num_classes, self.labels.tobytes()))


@dataclass(frozen=True, eq=False)
class BevLayout:
    """Top-down class map ``codes[i, j]`` with ``i`` along x and ``j`` along y."""

    codes: np.ndarray
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    palette_size: int = len(LAYOUT_PALETTE)

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.uint8, order="C")
        if codes.ndim != 2 or min(codes.shape) < 1:
            raise DimMismatch(f"codes must be a non-empty 2-D array, got shape {codes.shape}")
        if not self.cell_size > 0:
            raise FormatError(f"cell_size must be positive, got {self.cell_size}")
        if not 1 <= int(self.palette_size) <= 256:
            raise FormatError(f"palette_size must be in [1, 256], got {self.palette_size}")
        if (codes >= self.palette_size).any():
            raise CodeOutOfPalette(
                f"code {int(codes.max())} outside palette of size {self.palette_size}"
            )
        codes.setflags(write=False)
        origin = tuple(_as_f32(v) for v in self.origin)
        if len(origin) != 2:
            raise DimMismatch("origin must have 2 components")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "cell_size", _as_f32(self.cell_size))
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "palette_size", int(self.palette_size))

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(int(n) for n in self.codes.shape)

    def __eq__(self, other):
        if not isinstance(other, BevLayout):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.cell_size == other.cell_size
            and self.origin == other.origin
            and self.palette_size == other.palette_size
            and np.array_equal(self.codes, other.codes)
        )

    def __hash__(self):
        return hash((self.dims, self.cell_size, self.origin, self.palette_size, self.codes.tobytes()))


@dataclass(frozen=True, eq=False)
class ClassEmbeddingTable:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or min(w.shape) < 1:
            raise DimMismatch(f"weights must be (num_classes, embed_dim), got {w.shape}")
        if not np.isfinite(w).all():
            raise FormatError("embedding weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def orthonormal(cls, num_classes: int = NUM_SEMANTIC_CLASSES, embed_dim: int = 8, seed: int = 0):
        """Deterministic table whose rows decode exactly under argmax.

        With ``num_classes <= embed_dim`` the rows are orthonormal. Otherwise
        rows cannot be pairwise orthogonal, so the columns are made orthonormal
        instead and the seed is advanced until every row's self-logit strictly
        beats its logit against any other row.
        """
        if num_classes <= embed_dim:
            q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((embed_dim, embed_dim)))
            return cls(q[:num_classes].astype(np.float32).astype(np.float64))
        for s in range(seed, seed + 10_000):
            q, _ = np.linalg.qr(np.random.default_rng(s).standard_normal((num_classes, embed_dim)))
            w = q.astype(np.float32).astype(np.float64)
            gram = w @ w.T
            off = gram - np.diag(np.full(num_classes, np.inf))
            if (np.diag(gram) - off.max(axis=1) > 1e-3).all():
                return cls(w)
        raise RuntimeError("no decodable embedding table found")  # pragma: no cover

    def __eq__(self, other):
        if not isinstance(other, ClassEmbeddingTable):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash(self.weights.tobytes())


@dataclass(frozen=True)
class BevFeatureMap:
    """``(H, W, D * C')`` features; channel block ``k`` holds voxel ``k``'s embedding."""

    values: np.ndarray
    depth: int = field(default=1)

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


# --------------------------------------------------------------------------- codecs


def encode_svo(grid: SemanticOccupancyGrid) -> bytes:
    h, w, d = grid.dims
    header = _SVO_HEADER.pack(
        SVO_MAGIC, FORMAT_VERSION, h, w, d, grid.voxel_size, *grid.origin, grid.num_classes
    )
    return header + grid.labels.tobytes(order="C")


def decode_svo(data: bytes) -> SemanticOccupancyGrid:
    data = bytes(data)
    if len(data) < 4 or data[:4] != SVO_MAGIC:
        raise BadMagic(f"expected magic {SVO_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _SVO_HEADER.size:
        raise TruncatedPayload(f"header needs {_SVO_HEADER.size} bytes, got {len(data)}")
    _, version, h, w, d, voxel_size, ox, oy, oz, num_classes = _SVO_HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"SVO version {version} (only {FORMAT_VERSION} is supported)")
    if min(h, w, d) < 1:
        raise FormatError(f"dims must be >= 1, got {(h, w, d)}")
    n = h * w * d
    payload = data[_SVO_HEADER.size:]
    if len(payload) < n:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header declares {n}")
    if len(payload) > n:
        raise FormatError(f"payload has {len(payload) - n} trailing bytes")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, d)
    return SemanticOccupancyGrid(labels.copy(), voxel_size, (ox, oy, oz), num_classes)


def encode_bvl(layout: BevLayout) -> bytes:
    h, w = layout.dims
    header = _BVL_HEADER.pack(
        BVL_MAGIC, FORMAT_VERSION, h, w, layout.cell_size, *layout.origin, layout.palette_size
    )
    return header + layout.codes.tobytes(order="C")


def decode_bvl(data: bytes) -> BevLayout:
    data = bytes(data)
    if len(data) < 4 or data[:4] != BVL_MAGIC:
        raise BadMagic(f"expected magic {BVL_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _BVL_HEADER.size:
        raise TruncatedPayload(f"header needs {_BVL_HEADER.size} bytes, got {len(data)}")
    _, version, h, w, cell_size, ox, oy, palette_size = _BVL_HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"BVL version {version} (only {FORMAT_VERSION} is supported)")
    if min(h, w) < 1:
        raise FormatError(f"dims must be >= 1, got {(h, w)}")
    payload = data[_BVL_HEADER.size:]
    if len(payload) < h * w:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header declares {h * w}")
    if len(payload) > h * w:
        raise FormatError(f"payload has {len(payload) - h * w} trailing bytes")
    codes = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return BevLayout(codes.copy(), cell_size, (ox, oy), palette_size)


def encode_cemb(table: ClassEmbeddingTable) -> bytes:
    header = _CEMB_HEADER.pack(CEMB_MAGIC, FORMAT_VERSION, table.num_classes, table.embed_dim)
    return header + table.weights.astype("<f4").tobytes(order="C")


def decode_cemb(data: bytes) -> ClassEmbeddingTable:
    data = bytes(data)
    if len(data) < 4 or data[:4] != CEMB_MAGIC:
        raise BadMagic(f"expected magic {CEMB_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _CEMB_HEADER.size:
        raise TruncatedPayload(f"header needs {_CEMB_HEADER.size} bytes, got {len(data)}")
    _, version, k, c = _CEMB_HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"CEMB version {version} (only {FORMAT_VERSION} is supported)")
    payload = data[_CEMB_HEADER.size:]
    if len(payload) != 4 * k * c:
        raise TruncatedPayload(f"weights need {4 * k * c} bytes, got {len(payload)}")
    return ClassEmbeddingTable(np.frombuffer(payload, dtype="<f4").reshape(k, c))


# --------------------------------------------------------------------------- geometry


def voxel_center(grid: SemanticOccupancyGrid, index: Sequence[int]) -> np.ndarray:
    idx = tuple(int(v) for v in index)
    if len(idx) != 3 or any(not 0 <= v < n for v, n in zip(idx, grid.dims)):
        raise IndexOutOfBounds(f"index {idx} outside dims {grid.dims}")
    return np.asarray(grid.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * grid.voxel_size


def voxel_centers(grid: SemanticOccupancyGrid, indices: np.ndarray) -> np.ndarray:
    """Vectorised :func:`voxel_center` for an ``(N, 3)`` index array (no bound check)."""
    return np.asarray(grid.origin) + (np.asarray(indices, dtype=np.float64) + 0.5) * grid.voxel_size


# --------------------------------------------------------------------------- embeddings


def embed_labels(grid: SemanticOccupancyGrid, table: ClassEmbeddingTable) -> BevFeatureMap:
    if table.num_classes < grid.num_classes:
        raise DimMismatch(
            f"table has {table.num_classes} classes, grid declares {grid.num_classes}"
        )
    h, w, d = grid.dims
    # Row 255 stays zero so unknown voxels embed to the zero vector.
    lut = np.zeros((256, table.embed_dim))
    k = min(table.num_classes, UNKNOWN)
    lut[:k] = table.weights[:k]
    values = lut[grid.labels].reshape(h, w, d * table.embed_dim)
    return BevFeatureMap(values, depth=d)


def unembed_labels(
    fmap: BevFeatureMap,
    table: ClassEmbeddingTable,
    D: int,
    voxel_size: float = 1.0,
    origin: Iterable[float] = (0.0, 0.0, 0.0),
) -> SemanticOccupancyGrid:
    """Decode features by dot product with each class row and argmax.

    ``np.argmax`` returns the first maximum, which breaks ties toward the
    lowest class index.
    """
    if fmap.values.ndim != 3 or fmap.channels != D * table.embed_dim:
        raise DimMismatch(
            f"feature map has {fmap.values.shape[-1]} channels, expected {D} x {table.embed_dim}"
        )
    h, w = fmap.dims
    feats = fmap.values.reshape(h, w, D, table.embed_dim)
    logits = feats @ table.weights.T
    labels = np.argmax(logits, axis=-1).astype(np.uint8)
    return SemanticOccupancyGrid(labels, voxel_size, tuple(origin), min(table.num_classes, 255))


# --------------------------------------------------------------------------- layout edits


def edit_layout(layout: BevLayout, edits: Sequence[tuple[Sequence[int], int]]) -> BevLayout:
    """Apply ``(region, code)`` edits in order; later edits win on overlap.

    A region is a half-open cell rectangle ``(i0, j0, i1, j1)``.
    """
    h, w = layout.dims
    codes = layout.codes.copy()
    for region, code in edits:
        i0, j0, i1, j1 = (int(v) for v in region)
        if not (0 <= i0 < i1 <= h and 0 <= j0 < j1 <= w):
            raise RegionOutOfBounds(f"region {(i0, j0, i1, j1)} outside layout dims {(h, w)}")
        if not 0 <= int(code) < layout.palette_size:
            raise CodeOutOfPalette(f"code {code} outside palette of size {layout.palette_size}")
        codes[i0:i1, j0:j1] = code
    return BevLayout(codes, layout.cell_size, layout.origin, layout.palette_size)
