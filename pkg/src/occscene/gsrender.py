"""Occupancy to Gaussian primitives, and depth/semantic splatting.

Pixel ``(u, v)`` is evaluated at the continuous image coordinate ``(u, v)``
(no half-pixel offset), the same coordinate system the pinhole projection
``fx * x / z + cx`` produces.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DimMismatch, FormatError
from .voxgrid import LAYOUT_CODE, UNKNOWN, BevLayout, SemanticOccupancyGrid, voxel_centers

NEAR_PLANE = 0.05
COV_FLOOR = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
OPACITY_EPS = 1e-3
TILE = 16

DEFAULT_OPACITY = 0.99
DEFAULT_SCALE_FACTOR = 0.5


def quat_to_rotmat(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix from a ``(w, x, y, z)`` quaternion."""
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(q, scalar_first=True).as_matrix()


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    q = Rotation.from_matrix(r).as_quat(scalar_first=True)
    return q if q[0] >= 0 else -q


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    name: str = "cam"

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise FormatError(f"camera {self.name}: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise FormatError(f"camera {self.name}: resolution must be at least 1x1")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise FormatError(f"camera {self.name}: rotation is not orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def from_quat(cls, fx, fy, cx, cy, width, height, quat, translation, name="cam"):
        return cls(fx, fy, cx, cy, width, height, quat_to_rotmat(quat), translation, name)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fx, fy=None, width, height,
                cx=None, cy=None, name="cam"):
        """Camera at ``eye`` looking at ``target`` (camera x right, y down, z forward)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        return cls(fx, fx if fy is None else fy,
                   width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   width, height, r, -r @ eye, name)

    @property
    def center(self) -> np.ndarray:
        """Camera position in the world frame."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def relative_to(self, other: "Camera") -> tuple[np.ndarray, np.ndarray]:
        """``(R, t)`` mapping this camera's frame into ``other``'s frame."""
        r = other.rotation @ self.rotation.T
        return r, other.translation - r @ self.translation


def parse_camera_rig(text: str) -> list[Camera]:
    """One camera per line: ``name fx fy cx cy width height qw qx qy qz tx ty tz``.

    The quaternion and translation give the world-to-camera transform.
    """
    cams = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 14:
            raise FormatError(f"line {lineno}: expected 14 fields, got {len(parts)}")
        name = parts[0]
        try:
            fx, fy, cx, cy = (float(v) for v in parts[1:5])
            width, height = int(parts[5]), int(parts[6])
            quat = [float(v) for v in parts[7:11]]
            trans = [float(v) for v in parts[11:14]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if abs(np.linalg.norm(quat) - 1.0) > 1e-6:
            raise FormatError(f"line {lineno}: quaternion is not normalized")
        cams.append(Camera.from_quat(fx, fy, cx, cy, width, height, quat, trans, name))
    return cams


def format_camera_rig(cams: Sequence[Camera]) -> str:
    lines = []
    for c in cams:
        q = rotmat_to_quat(c.rotation)
        vals = [c.fx, c.fy, c.cx, c.cy, c.width, c.height, *q, *c.translation]
        lines.append(c.name + " " + " ".join(repr(float(v)) if not isinstance(v, int) else str(v)
                                             for v in vals))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GaussianPrimitiveSet:
    """Struct-of-arrays Gaussian set; quaternions are ``(w, x, y, z)``."""

    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacities: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        opac = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        labels = np.asarray(self.labels).reshape(n).astype(np.uint8)
        if (scales <= 0).any():
            raise FormatError("Gaussian scales must be positive")
        if n and np.abs(np.linalg.norm(quats, axis=1) - 1).max() > 1e-6:
            raise FormatError("Gaussian quaternions must be normalized")
        if ((opac <= 0) | (opac > 1)).any():
            raise FormatError("Gaussian opacities must lie in (0, 1]")
        for name, arr in (("means", means), ("scales", scales), ("quats", quats),
                          ("opacities", opac), ("labels", labels)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.means)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros(0))

    def covariances(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        r = Rotation.from_quat(self.quats, scalar_first=True).as_matrix()
        rs = r * self.scales[:, None, :]
        return rs @ rs.transpose(0, 2, 1)


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray  # (height, width) meters
    opacity: np.ndarray  # accumulated opacity


@dataclass(frozen=True)
class SemanticMap:
    labels: np.ndarray  # (height, width) uint8, 255 = no class


@dataclass(frozen=True)
class Projection:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


def voxels_to_gaussians(grid: SemanticOccupancyGrid, opacity: float = DEFAULT_OPACITY,
                        scale_factor: float = DEFAULT_SCALE_FACTOR) -> GaussianPrimitiveSet:
    """One axis-aligned Gaussian per occupied voxel, in grid index order."""
    if not 0 < opacity <= 1:
        raise FormatError(f"opacity must lie in (0, 1], got {opacity}")
    if not scale_factor > 0:
        raise FormatError(f"scale_factor must be positive, got {scale_factor}")
    idx = np.argwhere(grid.occupied)
    n = len(idx)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianPrimitiveSet(
        means=voxel_centers(grid, idx),
        scales=np.full((n, 3), scale_factor * grid.voxel_size),
        quats=quats,
        opacities=np.full(n, float(opacity)),
        labels=grid.labels[grid.occupied],
    )


def project_road_lines(grid: SemanticOccupancyGrid, layout: BevLayout, line_label: int,
                       line_codes: Sequence[int] = (LAYOUT_CODE["lane_line"],
                                                    LAYOUT_CODE["road_divider"])
                       ) -> SemanticOccupancyGrid:
    """Paint layout line cells onto the lowest occupied voxel of each column."""
    h, w, _ = grid.dims
    if layout.dims != (h, w):
        raise DimMismatch(f"layout dims {layout.dims} differ from grid footprint {(h, w)}")
    if not 0 <= line_label < grid.num_classes:
        raise DimMismatch(f"line label {line_label} outside grid classes")
    occ = grid.occupied
    has_ground = occ.any(axis=2)
    lowest = np.argmax(occ, axis=2)
    paint = np.isin(layout.codes, list(line_codes)) & has_ground
    labels = grid.labels.copy()
    ii, jj = np.nonzero(paint)
    labels[ii, jj, lowest[ii, jj]] = line_label
    return grid.with_labels(labels)


# --------------------------------------------------------------------------- projection


def _project_all(prims: GaussianPrimitiveSet, cam: Camera, near: float):
    n = len(prims)
    pc = cam.to_camera(prims.means) if n else np.zeros((0, 3))
    z = pc[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)
    x, y = pc[:, 0], pc[:, 1]
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    # The affine approximation blows up far off-axis; clamp the tangents it
    # is taken at to 1.3x the frustum, as standard splatting does.
    lim_x = 1.3 * max(cam.cx, cam.width - cam.cx) / cam.fx
    lim_y = 1.3 * max(cam.cy, cam.height - cam.cy) / cam.fy
    x = np.clip(x / zs, -lim_x, lim_x) * zs
    y = np.clip(y / zs, -lim_y, lim_y) * zs
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / zs**2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / zs**2
    t = jac @ cam.rotation
    cov = t @ prims.covariances() @ t.transpose(0, 2, 1)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1)) + COV_FLOOR * np.eye(2)
    return mean2d, cov, z, valid


def project_gaussian(prims: GaussianPrimitiveSet, cam: Camera, index: int = 0,
                     near: float = NEAR_PLANE) -> Projection | None:
    """Project one primitive; ``None`` means it was culled by the near plane."""
    one = GaussianPrimitiveSet(prims.means[index:index + 1], prims.scales[index:index + 1],
                               prims.quats[index:index + 1], prims.opacities[index:index + 1],
                               prims.labels[index:index + 1])
    mean2d, cov, z, valid = _project_all(one, cam, near)
    if not valid[0]:
        return None
    return Projection(mean2d[0], cov[0], float(z[0]))


def _conics(cov: np.ndarray) -> np.ndarray:
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    return np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)


def _composite(px, py, mean2d, conic, opac, t_stop):
    """Blend primitives (already front-to-back) over pixel coordinates.

    Returns depth sum, accumulated opacity and per-primitive weights
    (``(n_prims, n_pixels)``).
    """
    dx = px[None, :] - mean2d[:, 0:1]
    dy = py[None, :] - mean2d[:, 1:2]
    q = conic[:, 0:1] * dx * dx + 2.0 * conic[:, 1:2] * dx * dy + conic[:, 2:3] * dy * dy
    alpha = np.minimum(ALPHA_MAX, opac[:, None] * np.exp(-0.5 * q))
    alpha[alpha < ALPHA_MIN] = 0.0
    trans_after = np.cumprod(1.0 - alpha, axis=0)
    trans_before = np.vstack([np.ones((1, alpha.shape[1])), trans_after[:-1]])
    weights = alpha * trans_before
    if t_stop > 0:
        weights[trans_before < t_stop] = 0.0
    return weights


def _resolve(weights, depth, labels):
    dsum = depth @ weights
    acc = weights.sum(axis=0)
    classes = np.unique(labels)
    if len(classes):
        mass = np.stack([weights[labels == c].sum(axis=0) for c in classes])
        sem = classes[np.argmax(mass, axis=0)]
    else:
        sem = np.full(weights.shape[1], UNKNOWN, dtype=np.uint8)
    return dsum, acc, sem


def _finish(dsum, acc, sem, normalize_depth):
    empty = acc < OPACITY_EPS
    if normalize_depth:
        dsum = np.where(empty, 0.0, dsum / np.where(empty, 1.0, acc))
    dsum = np.where(empty, 0.0, dsum)
    sem = np.where(empty, UNKNOWN, sem).astype(np.uint8)
    return DepthMap(dsum, acc), SemanticMap(sem)


def rasterize(prims: GaussianPrimitiveSet, cam: Camera, *, normalize_depth: bool = False,
              near: float = NEAR_PLANE, tile: int = TILE, threads: int = 1
              ) -> tuple[DepthMap, SemanticMap]:
    """Tile-based depth and semantic splatting with early termination."""
    h, w = cam.height, cam.width
    dsum = np.zeros((h, w))
    acc = np.zeros((h, w))
    sem = np.full((h, w), UNKNOWN, dtype=np.uint8)
    if len(prims) == 0:
        return _finish(dsum, acc, sem, normalize_depth)

    mean2d, cov, z, valid = _project_all(prims, cam, near)
    opac = prims.opacities
    # Beyond this Mahalanobis radius alpha' < 1/255, so the bounding box is exact.
    qmax = 2.0 * np.log(np.maximum(255.0 * opac, 1.0))
    valid &= opac > ALPHA_MIN
    rx = np.sqrt(qmax * cov[:, 0, 0]) + 1e-6
    ry = np.sqrt(qmax * cov[:, 1, 1]) + 1e-6
    order = np.argsort(z, kind="stable")
    order = order[valid[order]]
    x0 = np.floor((mean2d[order, 0] - rx[order]) / tile).astype(np.int64)
    x1 = np.floor((mean2d[order, 0] + rx[order]) / tile).astype(np.int64)
    y0 = np.floor((mean2d[order, 1] - ry[order]) / tile).astype(np.int64)
    y1 = np.floor((mean2d[order, 1] + ry[order]) / tile).astype(np.int64)
    ntx, nty = -(-w // tile), -(-h // tile)
    keep = (x1 >= 0) & (x0 < ntx) & (y1 >= 0) & (y0 < nty)
    order, x0, x1, y0, y1 = order[keep], x0[keep], x1[keep], y0[keep], y1[keep]
    x0, y0 = np.maximum(x0, 0), np.maximum(y0, 0)
    x1, y1 = np.minimum(x1, ntx - 1), np.minimum(y1, nty - 1)

    # Bin (tile, depth-rank) pairs; a stable sort on tile id keeps depth order.
    tile_ids, ranks = [], []
    for rank in range(len(order)):
        ty, tx = np.meshgrid(np.arange(y0[rank], y1[rank] + 1),
                             np.arange(x0[rank], x1[rank] + 1), indexing="ij")
        ids = (ty * ntx + tx).ravel()
        tile_ids.append(ids)
        ranks.append(np.full(len(ids), rank))
    if not tile_ids:
        return _finish(dsum, acc, sem, normalize_depth)
    tile_ids = np.concatenate(tile_ids)
    ranks = np.concatenate(ranks)
    srt = np.argsort(tile_ids, kind="stable")
    tile_ids, ranks = tile_ids[srt], ranks[srt]
    bounds = np.searchsorted(tile_ids, np.arange(ntx * nty + 1))

    conic = _conics(cov)
    prim_ids = order

    def run_tile(t):
        lo, hi = bounds[t], bounds[t + 1]
        if lo == hi:
            return
        ty, tx = divmod(t, ntx)
        ys = np.arange(ty * tile, min((ty + 1) * tile, h))
        xs = np.arange(tx * tile, min((tx + 1) * tile, w))
        py, px = np.meshgrid(ys, xs, indexing="ij")
        ids = prim_ids[ranks[lo:hi]]
        wts = _composite(px.ravel().astype(np.float64), py.ravel().astype(np.float64),
                         mean2d[ids], conic[ids], opac[ids], T_STOP)
        d, a, s = _resolve(wts, z[ids], prims.labels[ids])
        shape = (len(ys), len(xs))
        dsum[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = d.reshape(shape)
        acc[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = a.reshape(shape)
        sem[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = s.reshape(shape)

    tiles = range(ntx * nty)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_tile, tiles))
    else:
        for t in tiles:
            run_tile(t)
    return _finish(dsum, acc, sem, normalize_depth)


def composite_reference(prims: GaussianPrimitiveSet, cam: Camera, *,
                        normalize_depth: bool = False, near: float = NEAR_PLANE,
                        chunk: int = 4096) -> tuple[DepthMap, SemanticMap]:
    """Brute-force per-pixel compositing over every primitive; no tiles, no early stop."""
    h, w = cam.height, cam.width
    npix = h * w
    dsum = np.zeros(npix)
    acc = np.zeros(npix)
    sem = np.full(npix, UNKNOWN, dtype=np.uint8)
    if len(prims):
        mean2d, cov, z, valid = _project_all(prims, cam, near)
        order = np.argsort(z, kind="stable")
        order = order[valid[order]]
        conic = _conics(cov)
        pv, pu = np.divmod(np.arange(npix), w)
        for lo in range(0, npix, chunk):
            sl = slice(lo, min(lo + chunk, npix))
            wts = _composite(pu[sl].astype(np.float64), pv[sl].astype(np.float64),
                             mean2d[order], conic[order], prims.opacities[order], 0.0)
            dsum[sl], acc[sl], sem[sl] = _resolve(wts, z[order], prims.labels[order])
    depth, semantic = _finish(dsum, acc, sem, normalize_depth)
    return (DepthMap(depth.values.reshape(h, w), depth.opacity.reshape(h, w)),
            SemanticMap(semantic.labels.reshape(h, w)))


def render_views(grid: SemanticOccupancyGrid, cams: Sequence[Camera], *,
                 opacity: float = DEFAULT_OPACITY, scale_factor: float = DEFAULT_SCALE_FACTOR,
                 normalize_depth: bool = False, threads: int = 1):
    prims = voxels_to_gaussians(grid, opacity, scale_factor)
    return [rasterize(prims, cam, normalize_depth=normalize_depth, threads=threads)
            for cam in cams]

