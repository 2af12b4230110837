"""Occupancy-conditioned LiDAR simulation.

Rays are sampled uniformly against the grid, resampled only inside occupied
voxels, and rendered to depth with SDF-derived opacities. ``dda_raycast`` is
the hard ray-casting reference the renderer is checked against.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    BadMagic,
    DimMismatch,
    EmptySupport,
    FormatError,
    LengthMismatch,
    NoOverlap,
    TruncatedPayload,
    VersionUnsupported,
)
from .gsrender import quat_to_rotmat
from .voxgrid import SemanticOccupancyGrid

DEFAULT_PRESAMPLES = 512
DEFAULT_RESAMPLES = 32
PHI_FLOOR = 1e-12
LHED_MAGIC = b"LHED"
DROP_MODES = ("threshold", "bernoulli", "off")


# --------------------------------------------------------------------------- rays and rigs


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    row: int = 0
    col: int = 0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise FormatError(f"ray direction must be unit length, got norm {np.linalg.norm(d)}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class RayBatch:
    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3), unit
    rows: np.ndarray
    cols: np.ndarray

    def __len__(self):
        return len(self.directions)

    def __getitem__(self, i) -> Ray:
        return Ray(self.origins[i], self.directions[i], int(self.rows[i]), int(self.cols[i]))

    @classmethod
    def from_rays(cls, rays: Sequence[Ray]) -> "RayBatch":
        return cls(np.array([r.origin for r in rays]).reshape(-1, 3),
                   np.array([r.direction for r in rays]).reshape(-1, 3),
                   np.array([r.row for r in rays], dtype=np.int64),
                   np.array([r.col for r in rays], dtype=np.int64))

    def take(self, sl) -> "RayBatch":
        return RayBatch(self.origins[sl], self.directions[sl], self.rows[sl], self.cols[sl])


@dataclass(frozen=True)
class SensorRig:
    beams: int = 32
    azimuth_steps: int = 1024
    elevation_min: float = -30.0
    elevation_max: float = 10.0
    max_range: float = 70.0
    mount_translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mount_rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.beams < 1 or self.azimuth_steps < 1:
            raise FormatError("beams and azimuth_steps must be >= 1")
        # A single beam may sit on a degenerate range.
        if not (self.elevation_min < self.elevation_max
                or (self.beams == 1 and self.elevation_min == self.elevation_max)):
            raise FormatError("elevation_min must be below elevation_max")
        if not self.max_range > 0:
            raise FormatError("max_range must be positive")
        if abs(np.linalg.norm(self.mount_rotation) - 1) > 1e-6:
            raise FormatError("mount_rotation quaternion must be normalized")


_RIG_KEYS = {
    "beams": int, "azimuth_steps": int, "elevation_min": float, "elevation_max": float,
    "max_range": float,
}


def parse_rig_config(text: str) -> SensorRig:
    """``key=value`` lines; vector values are whitespace separated."""
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _RIG_KEYS:
                kwargs[key] = _RIG_KEYS[key](value)
            elif key == "mount_translation":
                kwargs[key] = tuple(float(v) for v in value.split())
                if len(kwargs[key]) != 3:
                    raise ValueError("needs 3 values")
            elif key == "mount_rotation":
                kwargs[key] = tuple(float(v) for v in value.split())
                if len(kwargs[key]) != 4:
                    raise ValueError("needs 4 values (qw qx qy qz)")
            else:
                raise FormatError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {key}: {exc}") from None
    return SensorRig(**kwargs)


def format_rig_config(rig: SensorRig) -> str:
    return "".join([
        f"beams={rig.beams}\n",
        f"azimuth_steps={rig.azimuth_steps}\n",
        f"elevation_min={rig.elevation_min!r}\n",
        f"elevation_max={rig.elevation_max!r}\n",
        f"max_range={rig.max_range!r}\n",
        "mount_translation=" + " ".join(repr(float(v)) for v in rig.mount_translation) + "\n",
        "mount_rotation=" + " ".join(repr(float(v)) for v in rig.mount_rotation) + "\n",
    ])


def make_rig(rig: SensorRig) -> RayBatch:
    """``beams x azimuth_steps`` rays, row-major; row 0 is the highest beam.

    Azimuth 0 points along the sensor's +x and increases toward +y.
    """
    elev = np.deg2rad(np.linspace(rig.elevation_max, rig.elevation_min, rig.beams))
    azim = 2.0 * np.pi * np.arange(rig.azimuth_steps) / rig.azimuth_steps
    el, az = np.meshgrid(elev, azim, indexing="ij")
    local = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], -1)
    dirs = local.reshape(-1, 3) @ quat_to_rotmat(rig.mount_rotation).T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rows, cols = np.meshgrid(np.arange(rig.beams), np.arange(rig.azimuth_steps), indexing="ij")
    origins = np.broadcast_to(np.asarray(rig.mount_translation, dtype=np.float64), dirs.shape)
    return RayBatch(origins.copy(), dirs, rows.ravel(), cols.ravel())


# --------------------------------------------------------------------------- grid queries


def ray_aabb(grid: SemanticOccupancyGrid, origins: np.ndarray, dirs: np.ndarray):
    """Slab test; returns ``(t_near, t_far, hit)`` with ``t_near`` clamped at 0."""
    lo, hi = grid.bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    parallel = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = np.maximum(tmin.max(axis=1), 0.0)
    t_far = tmax.min(axis=1)
    return t_near, t_far, t_far >= t_near


def voxel_index(grid: SemanticOccupancyGrid, points: np.ndarray):
    """Integer voxel index per point and whether it falls inside the grid.

    Points on the grid's max faces are assigned to the last voxel.
    """
    lo, hi = grid.bounds
    dims = np.asarray(grid.dims)
    rel = (points - lo) / grid.voxel_size
    idx = np.floor(rel).astype(np.int64)
    inside = ((points >= lo) & (points <= hi)).all(axis=-1)
    return np.clip(idx, 0, dims - 1), inside


def occupied_at(grid: SemanticOccupancyGrid, points: np.ndarray) -> np.ndarray:
    idx, inside = voxel_index(grid, points)
    occ = grid.occupied[idx[..., 0], idx[..., 1], idx[..., 2]]
    return occ & inside


@dataclass(frozen=True)
class RaycastHit:
    depth: float
    label: int


def dda_raycast_batch(grid: SemanticOccupancyGrid, rays: RayBatch, max_range: float):
    """Amanatides-Woo traversal for many rays at once.

    Returns ``(depth, label, hit)``; depth is the distance to the entry face of
    the first occupied voxel (0 when the ray starts inside one) and NaN on miss.
    """
    n = len(rays)
    depth = np.full(n, np.nan)
    label = np.zeros(n, dtype=np.uint8)
    hit = np.zeros(n, dtype=bool)
    o, v = rays.origins, rays.directions
    t_near, t_far, overlap = ray_aabb(grid, o, v)
    active = np.nonzero(overlap & (t_near <= max_range))[0]
    if len(active) == 0:
        return depth, label, hit
    lo, _ = grid.bounds
    dims = np.asarray(grid.dims)
    vs = grid.voxel_size
    o, v, t = o[active], v[active], t_near[active]
    idx, _ = voxel_index(grid, o + t[:, None] * v)
    step = np.sign(v).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = lo + (idx + (step > 0)) * vs
        t_max = np.where(step != 0, (boundary - o) / v, np.inf)
        t_delta = np.where(step != 0, vs / np.abs(v), np.inf)
    labels = grid.labels
    occ = grid.occupied
    rows = np.arange(len(active))
    for _ in range(int(dims.sum()) + 3):
        cur = occ[idx[:, 0], idx[:, 1], idx[:, 2]]
        if cur.any():
            k = active[cur]
            depth[k] = t[cur]
            label[k] = labels[idx[cur, 0], idx[cur, 1], idx[cur, 2]]
            hit[k] = True
        axis = np.argmin(t_max, axis=1)
        t_next = t_max[rows, axis]
        nxt = idx.copy()
        nxt[rows, axis] += step[rows, axis]
        keep = ~cur & (nxt >= 0).all(axis=1) & (nxt < dims).all(axis=1) & (t_next <= max_range)
        if not keep.any():
            break
        t_max[rows, axis] += t_delta[rows, axis]
        active, idx, t = active[keep], nxt[keep], t_next[keep]
        t_max, t_delta, step = t_max[keep], t_delta[keep], step[keep]
        rows = np.arange(len(active))
    return depth, label, hit


def dda_raycast(grid: SemanticOccupancyGrid, ray: Ray, max_range: float) -> RaycastHit | None:
    """Hard ray cast of a single ray; ``None`` is a miss."""
    depth, label, hit = dda_raycast_batch(grid, RayBatch.from_rays([ray]), max_range)
    return RaycastHit(float(depth[0]), int(label[0])) if hit[0] else None


# --------------------------------------------------------------------------- sampling


def _presample_batch(grid, rays: RayBatch, M: int, max_range: float):
    """Presample positions, occupancy, flat voxel index and overlap flag per ray."""
    t_near, t_far, overlap = ray_aabb(grid, rays.origins, rays.directions)
    t_end = np.minimum(t_far, max_range)
    ok = overlap & (t_end >= t_near)
    # rays that miss the box get a dummy zero-length segment; they are masked out below
    t_near = np.where(ok, t_near, 0.0)
    t_end = np.where(ok, t_end, 0.0)
    frac = np.linspace(0.0, 1.0, M)
    s = t_near[:, None] + (np.maximum(t_end - t_near, 0.0))[:, None] * frac
    lo, hi = grid.bounds
    dims = grid.dims
    flat = np.zeros(s.shape, dtype=np.int64)
    inside = np.broadcast_to(ok[:, None], s.shape).copy()
    # per axis to keep the temporaries at (rays, M)
    for a in range(3):
        x = rays.origins[:, a, None] + s * rays.directions[:, a, None]
        inside &= (x >= lo[a]) & (x <= hi[a])
        i = np.floor((x - lo[a]) / grid.voxel_size).astype(np.int64)
        np.clip(i, 0, dims[a] - 1, out=i)
        flat *= dims[a]
        flat += i
    p = grid.occupied.ravel()[flat] & inside
    return s, p, flat, ok


def presample_pdf(grid: SemanticOccupancyGrid, ray: Ray, M: int, max_range: float):
    """Uniform samples over the ray's overlap with the grid and their 0/1 occupancy."""
    if M < 2:
        raise DimMismatch("need at least two presamples")
    s, p, _, ok = _presample_batch(grid, RayBatch.from_rays([ray]), M, max_range)
    if not ok[0]:
        raise NoOverlap("ray does not overlap the grid within range")
    return s[0], p[0].astype(np.float64)


_MASK64 = (1 << 64) - 1


def hash_uniform(seed: int, rows, cols, index, stream: int = 0) -> np.ndarray:
    """Counter-based uniforms in [0, 1) keyed by ``(seed, row, col, index, stream)``.

    SplitMix64 finalizer over a mixed counter; every draw depends only on its
    key, so results do not depend on batching or thread scheduling.
    """
    rows = np.asarray(rows, dtype=np.uint64)
    cols = np.asarray(cols, dtype=np.uint64)
    index = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = np.uint64((int(seed) * 0x9E3779B97F4A7C15 + stream * 0xD1B54A32D192ED03) & _MASK64)
        x = x ^ (rows * np.uint64(0xBF58476D1CE4E5B9))
        x = x ^ (cols * np.uint64(0x94D049BB133111EB) + np.uint64(0x632BE59BD9B4E019))
        x = x ^ (index * np.uint64(0xA0761D6478BD642F) + np.uint64(0xE7037ED1A0B428DB))
        for _ in range(2):
            x = x + np.uint64(0x9E3779B97F4A7C15)
            x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _sample_intervals(lo, hi, weight, n, seed, rows, cols):
    """Stratified inverse-CDF draws over sorted, disjoint intervals ``[lo_k, hi_k]``.

    Each interval with ``weight`` set carries uniform density. Returns the
    ``(R, n)`` positions and a per-ray flag telling whether there was any mass.
    """
    mass = np.where(weight, np.maximum(hi - lo, 0.0), 0.0)
    cum = np.concatenate([np.zeros((len(lo), 1)), np.cumsum(mass, axis=1)], axis=1)
    total = cum[:, -1]
    ok = total > 0
    j = np.arange(n)
    xi = hash_uniform(seed, rows[:, None], cols[:, None], j[None, :], stream=1)
    target = (j[None, :] + xi) / n * total[:, None]
    # per-row searchsorted via a row offset larger than any cumulative mass
    nrow, k = lo.shape
    offset = (np.arange(nrow) * (np.max(total, initial=0.0) + 1.0))[:, None]
    flat = np.searchsorted((cum[:, 1:] + offset).ravel(), (target + offset).ravel(), side="right")
    bins = np.clip(flat.reshape(target.shape) - np.arange(nrow)[:, None] * k, 0, k - 1)
    r = np.arange(nrow)[:, None]
    left = lo[r, bins]
    pos = np.clip(left + (target - cum[r, bins]), left, hi[r, bins])
    return np.maximum.accumulate(pos, axis=1), ok


def _pair_intervals(s, p):
    """Intervals between consecutive presamples, weighted when both ends are occupied."""
    p = np.asarray(p).astype(bool)
    return s[:, :-1], s[:, 1:], p[:, :-1] & p[:, 1:]


def _voxel_cells(grid, rays: RayBatch, s, p, flat):
    """One interval per occupied presample: its midpoint cell clipped to its voxel's chord.

    Every point of such an interval lies in the presample's own voxel.
    """
    mid = 0.5 * (s[:, 1:] + s[:, :-1])
    lo = np.concatenate([s[:, :1], mid], axis=1)
    hi = np.concatenate([mid, s[:, -1:]], axis=1)
    rr, cc = np.nonzero(p)
    if len(rr):
        o = rays.origins[rr]
        v = rays.directions[rr]
        ijk = np.stack(np.unravel_index(flat[rr, cc], grid.dims), axis=1)
        box_lo = np.asarray(grid.origin) + ijk * grid.voxel_size
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (box_lo - o) / v
            t2 = (box_lo + grid.voxel_size - o) / v
        par = v == 0
        t_in = np.where(par, -np.inf, np.minimum(t1, t2)).max(axis=1)
        t_out = np.where(par, np.inf, np.maximum(t1, t2)).min(axis=1)
        lo[rr, cc] = np.maximum(lo[rr, cc], t_in)
        hi[rr, cc] = np.minimum(hi[rr, cc], t_out)
    return lo, hi, np.asarray(p, dtype=bool) & (hi > lo)


def resample(s, p, n: int, seed: int = 0, *, intervals=None, row: int = 0, col: int = 0):
    """Draw ``n`` sorted positions from the occupied part of a presampled ray.

    By default interval ``[s_i, s_{i+1}]`` carries uniform density when both
    ``p_i`` and ``p_{i+1}`` are 1. ``intervals=(lo, hi)`` instead gives each
    sample its own interval, weighted by ``p_i``.
    """
    s = np.asarray(s, dtype=np.float64)[None]
    p = np.asarray(p)[None]
    if s.shape != p.shape:
        raise LengthMismatch("s and p must have equal length")
    if intervals is None:
        lo, hi, weight = _pair_intervals(s, p)
    else:
        lo = np.asarray(intervals[0], dtype=np.float64)[None]
        hi = np.asarray(intervals[1], dtype=np.float64)[None]
        if lo.shape != s.shape or hi.shape != s.shape:
            raise LengthMismatch("intervals must match the samples")
        weight = p.astype(bool)
    pos, ok = _sample_intervals(lo, hi, weight, n, seed, np.array([row]), np.array([col]))
    if not ok[0]:
        raise EmptySupport("no occupied interval to sample from")
    return pos[0]


# --------------------------------------------------------------------------- rendering


def volume_render_weights(sdf: np.ndarray, s: np.ndarray, sharpness: float):
    """Batched weights/depth along the last axis; see :func:`volume_render_depth`."""
    if not sharpness > 0:
        raise FormatError("sharpness must be positive")
    phi = expit(sharpness * np.asarray(sdf, dtype=np.float64))
    cur, nxt = phi[..., :-1], phi[..., 1:]
    safe = cur >= PHI_FLOOR
    beta = np.where(safe, (cur - nxt) / np.where(safe, cur, 1.0), 0.0)
    beta = np.maximum(beta, 0.0)
    beta = np.concatenate([beta, np.zeros(beta.shape[:-1] + (1,))], axis=-1)
    trans = np.cumprod(1.0 - beta, axis=-1)
    trans = np.concatenate([np.ones(beta.shape[:-1] + (1,)), trans[..., :-1]], axis=-1)
    weights = trans * beta
    return weights, (weights * s).sum(axis=-1)


def volume_render_depth(sdf, s, sharpness: float):
    """Opacity ``beta_i = max((Phi(f_i) - Phi(f_{i+1})) / Phi(f_i), 0)``, last one 0.

    ``w_i = prod_{j<i}(1 - beta_j) * beta_i`` and depth ``h = sum w_i s_i``.
    """
    sdf = np.asarray(sdf, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if sdf.shape != s.shape or sdf.shape[-1] < 2:
        raise LengthMismatch("need matching sdf/s arrays with at least two samples")
    weights, h = volume_render_weights(sdf, s, sharpness)
    return weights, (float(h) if np.ndim(h) == 0 else h)


def ray_feature(weights, features) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == weights.ndim:
        features = features[..., None]
    if features.shape[:-1] != weights.shape:
        raise LengthMismatch(f"{weights.shape[-1]} weights for {features.shape[-2]} features")
    return np.einsum("...i,...if->...f", weights, features)


# --------------------------------------------------------------------------- features and heads


_NEIGHBOURS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
                        if (a, b, c) != (0, 0, 0)], dtype=np.int64)


@dataclass
class FeatureProvider:
    """Per-point features: an analytic truncated SDF, or a loaded feature volume.

    Analytic features are the signed distance (meters) to the surface of the
    union of occupied voxels, negative inside and truncated to one voxel.
    Loaded volumes are ``(H, W, D, F)`` values at voxel centres, sampled
    trilinearly. Points outside the grid get ``far_field``.
    """

    grid: SemanticOccupancyGrid
    mode: str = "analytic_sdf"
    volume: np.ndarray | None = None
    far_field: float | None = None
    evaluations: int = field(default=0, init=False)

    def __post_init__(self):
        if self.mode not in ("analytic_sdf", "loaded"):
            raise FormatError(f"unknown feature mode {self.mode!r}")
        if self.mode == "loaded":
            vol = np.asarray(self.volume, dtype=np.float64)
            if vol.ndim == 3:
                vol = vol[..., None]
            if vol.shape[:3] != self.grid.dims or vol.shape[3] < 1:
                raise DimMismatch(f"feature volume {vol.shape} does not match grid {self.grid.dims}")
            self.volume = vol
        if self.far_field is None:
            self.far_field = self.truncation if self.mode == "analytic_sdf" else 0.0
        occ = self.grid.occupied
        # pad with free space so the grid border behaves like an open boundary
        self._occ = np.pad(occ, 1, constant_values=False)

    @property
    def truncation(self) -> float:
        return float(self.grid.voxel_size)

    @property
    def feature_dim(self) -> int:
        return 1 if self.mode == "analytic_sdf" else self.volume.shape[3]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        self.evaluations += int(np.prod(points.shape[:-1]))
        flat = points.reshape(-1, 3)
        if self.mode == "analytic_sdf":
            out = self._sdf(flat)[:, None]
        else:
            out = self._trilinear(flat)
        return out.reshape(points.shape[:-1] + (out.shape[-1],))

    def _sdf(self, pts):
        g = self.grid
        vs = g.voxel_size
        idx, inside = voxel_index(g, pts)
        local = (pts - np.asarray(g.origin)) / vs - idx  # position within the voxel, [0, 1]
        occ = self._occ.ravel()
        strides = np.array([(g.dims[1] + 2) * (g.dims[2] + 2), g.dims[2] + 2, 1])
        base = (idx + 1) @ strides
        here = occ[base]
        # squared gaps to the lower / upper face along each axis
        sq = {-1: local ** 2, 1: (1.0 - local) ** 2}
        best2 = np.full(len(pts), (self.truncation / vs) ** 2)
        for off in _NEIGHBOURS:
            # only neighbours of the opposite state bound the distance
            cand = occ[base + off @ strides] != here
            if not cand.any():
                continue
            d2 = sum(sq[int(o)][:, a] for a, o in enumerate(off) if o != 0)
            np.minimum(best2, np.where(cand, d2, best2), out=best2)
        best = np.sqrt(best2) * vs
        sdf = np.where(here, -best, best)
        return np.where(inside, sdf, self.far_field)

    def _trilinear(self, pts):
        g = self.grid
        dims = np.asarray(g.dims)
        c = (pts - np.asarray(g.origin)) / g.voxel_size - 0.5
        _, inside = voxel_index(g, pts)
        c = np.clip(c, 0, dims - 1)
        i0 = np.minimum(np.floor(c).astype(np.int64), np.maximum(dims - 2, 0))
        i1 = np.minimum(i0 + 1, dims - 1)
        f = c - i0
        vol = self.volume
        out = np.zeros((len(pts), vol.shape[3]))
        for bits in range(8):
            sel = [(bits >> a) & 1 for a in range(3)]
            ix = [np.where(sel[a], i1[:, a], i0[:, a]) for a in range(3)]
            wgt = np.prod([np.where(sel[a], f[:, a], 1 - f[:, a]) for a in range(3)], axis=0)
            out += wgt[:, None] * vol[ix[0], ix[1], ix[2]]
        return np.where(inside[:, None], out, self.far_field)


@dataclass(frozen=True)
class MLP:
    """Dense layers ``x @ W + b`` with ReLU between them; no layers is the identity."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...] = ()

    def __post_init__(self):
        layers = []
        prev = None
        for w, b in self.layers:
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64).reshape(-1)
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimMismatch(f"layer weight {w.shape} / bias {b.shape} mismatch")
            if prev is not None and w.shape[0] != prev:
                raise DimMismatch(f"layer input {w.shape[0]} != previous output {prev}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise FormatError("MLP weights must be finite")
            prev = w.shape[1]
            layers.append((w, b))
        object.__setattr__(self, "layers", tuple(layers))

    @property
    def in_dim(self):
        return self.layers[0][0].shape[0] if self.layers else None

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[1] if self.layers else None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        for k, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if k < len(self.layers) - 1:
                x = np.maximum(x, 0.0)
        return x


@dataclass(frozen=True)
class LidarHead:
    sdf_mlp: MLP
    intensity_mlp: MLP
    drop_mlp: MLP
    sharpness: float

    def __post_init__(self):
        if not self.sharpness > 0:
            raise FormatError("sharpness must be positive")
        if self.sdf_mlp.layers and self.sdf_mlp.out_dim != 1:
            raise DimMismatch("sdf MLP must output one value")
        for name in ("intensity_mlp", "drop_mlp"):
            if getattr(self, name).out_dim != 1:
                raise DimMismatch(f"{name} must output one value")

    def check_features(self, feature_dim: int):
        sdf_in = self.sdf_mlp.in_dim
        if sdf_in is not None and sdf_in != feature_dim:
            raise DimMismatch(f"sdf MLP expects {sdf_in} features, provider gives {feature_dim}")
        if sdf_in is None and feature_dim != 1:
            raise DimMismatch("identity sdf head needs scalar features")
        for name in ("intensity_mlp", "drop_mlp"):
            if getattr(self, name).in_dim != feature_dim:
                raise DimMismatch(f"{name} expects {getattr(self, name).in_dim} features")

    @classmethod
    def analytic(cls, voxel_size: float = 1.0, sharpness: float | None = None) -> "LidarHead":
        """Identity SDF head with fixed scalar intensity and drop heads."""
        return cls(
            sdf_mlp=MLP(),
            intensity_mlp=MLP(((np.array([[-2.0 / voxel_size]]), np.array([0.0])),)),
            drop_mlp=MLP(((np.array([[0.0]]), np.array([-4.0])),)),
            sharpness=200.0 / voxel_size if sharpness is None else sharpness,
        )

    def sdf(self, features: np.ndarray) -> np.ndarray:
        if not self.sdf_mlp.layers:
            return features[..., 0]
        return self.sdf_mlp(features)[..., 0]


def encode_lidar_head(head: LidarHead) -> bytes:
    out = [struct.pack("<4sI", LHED_MAGIC, 1)]
    for mlp in (head.sdf_mlp, head.intensity_mlp, head.drop_mlp):
        out.append(struct.pack("<I", len(mlp.layers)))
        for w, b in mlp.layers:
            out.append(struct.pack("<II", *w.shape))
            out.append(w.astype("<f4").tobytes())
            out.append(b.astype("<f4").tobytes())
    out.append(struct.pack("<f", head.sharpness))
    return b"".join(out)


def decode_lidar_head(data: bytes) -> LidarHead:
    if data[:4] != LHED_MAGIC:
        raise BadMagic(f"expected magic {LHED_MAGIC!r}, got {data[:4]!r}")
    try:
        _, version = struct.unpack_from("<4sI", data)
        if version != 1:
            raise VersionUnsupported(f"LHED version {version}")
        off = 8
        mlps = []
        for _ in range(3):
            (count,) = struct.unpack_from("<I", data, off)
            off += 4
            layers = []
            for _ in range(count):
                fan_in, fan_out = struct.unpack_from("<II", data, off)
                off += 8
                w = np.frombuffer(data, "<f4", fan_in * fan_out, off).reshape(fan_in, fan_out)
                off += 4 * fan_in * fan_out
                b = np.frombuffer(data, "<f4", fan_out, off)
                off += 4 * fan_out
                layers.append((w, b))
            mlps.append(MLP(tuple(layers)))
        (sharpness,) = struct.unpack_from("<f", data, off)
        off += 4
    except (struct.error, ValueError) as exc:
        raise TruncatedPayload(f"LHED file truncated: {exc}") from None
    if off != len(data):
        raise FormatError(f"LHED file has {len(data) - off} trailing bytes")
    return LidarHead(*mlps, sharpness=float(sharpness))


# --------------------------------------------------------------------------- simulation


@dataclass(frozen=True)
class LidarPointCloud:
    rows: np.ndarray
    cols: np.ndarray
    depth: np.ndarray  # NaN on miss
    points: np.ndarray
    intensity: np.ndarray
    drop_prob: np.ndarray
    dropped: np.ndarray
    miss: np.ndarray
    sample_depths: np.ndarray | None = None  # resampled positions per ray (NaN on miss)
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.depth)

    @property
    def exported(self) -> np.ndarray:
        return ~self.miss & ~self.dropped

    def vertices(self, include_dropped: bool = False) -> np.ndarray:
        keep = ~self.miss if include_dropped else self.exported
        out = np.empty(int(keep.sum()), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                               ("intensity", "<f4"), ("drop_prob", "<f4"),
                                               ("dropped", "u1")])
        out["x"], out["y"], out["z"] = self.points[keep].T
        out["intensity"] = self.intensity[keep]
        out["drop_prob"] = self.drop_prob[keep]
        out["dropped"] = self.dropped[keep]
        return out


def _simulate_chunk(grid, rays: RayBatch, provider, head: LidarHead, M, n, seed, drop_mode,
                    sampling, max_range):
    nr = len(rays)
    s, p, idx, ok = _presample_batch(grid, rays, M, max_range)
    if sampling == "prior":
        lo, hi, weight = _voxel_cells(grid, rays, s, p, idx)
        pos, has_mass = _sample_intervals(lo, hi, weight, n, seed, rays.rows, rays.cols)
        live = ok & has_mass
    else:
        pos, live = s, ok.copy()
    evals = int(live.sum()) * pos.shape[1]
    depth = np.full(nr, np.nan)
    samples = np.full((nr, pos.shape[1]), np.nan) if sampling == "prior" else None
    fdim = provider.feature_dim
    vr = np.zeros((nr, fdim))
    if live.any():
        lp = pos[live]
        pts = rays.origins[live][:, None, :] + lp[..., None] * rays.directions[live][:, None, :]
        feats = provider(pts)
        weights, h = volume_render_weights(head.sdf(feats), lp, head.sharpness)
        depth[live] = h
        vr[live] = np.einsum("ri,rif->rf", weights, feats)
        if samples is not None:
            samples[live] = lp
    miss = ~(depth > 0)
    depth[miss] = np.nan
    points = rays.origins + np.nan_to_num(depth)[:, None] * rays.directions
    intensity = expit(head.intensity_mlp(vr)[:, 0])
    drop_prob = expit(head.drop_mlp(vr)[:, 0])
    if drop_mode == "threshold":
        dropped = drop_prob > 0.5
    elif drop_mode == "bernoulli":
        dropped = hash_uniform(seed, rays.rows, rays.cols, 0, stream=2) < drop_prob
    else:
        dropped = np.zeros(nr, dtype=bool)
    dropped &= ~miss
    intensity[miss] = 0.0
    drop_prob[miss] = 0.0
    return dict(depth=depth, points=points, intensity=intensity, drop_prob=drop_prob,
                dropped=dropped, miss=miss, samples=samples, evals=evals,
                tests=int(ok.sum()) * M)


def simulate(grid: SemanticOccupancyGrid, rig: SensorRig | RayBatch,
             provider: FeatureProvider | None = None, head: LidarHead | None = None, *,
             M: int = DEFAULT_PRESAMPLES, n: int = DEFAULT_RESAMPLES, seed: int = 0,
             drop_mode: str = "threshold", sampling: str = "prior",
             max_range: float | None = None, threads: int = 1, chunk: int = 2048
             ) -> LidarPointCloud:
    """Render a point cloud for every ray of ``rig``.

    ``sampling="uniform"`` is the dense baseline: features are evaluated at
    all ``M`` presamples instead of ``n`` occupancy-guided resamples.
    """
    if drop_mode not in DROP_MODES:
        raise FormatError(f"drop_mode must be one of {DROP_MODES}")
    if sampling not in ("prior", "uniform"):
        raise FormatError("sampling must be 'prior' or 'uniform'")
    if M < 2 or n < 2:
        raise DimMismatch("need M >= 2 presamples and n >= 2 resamples")
    if isinstance(rig, SensorRig):
        rays = make_rig(rig)
        max_range = rig.max_range if max_range is None else max_range
    else:
        rays = rig
        if max_range is None:
            raise FormatError("max_range is required when passing rays directly")
    provider = FeatureProvider(grid) if provider is None else provider
    head = LidarHead.analytic(grid.voxel_size) if head is None else head
    head.check_features(provider.feature_dim)

    starts = range(0, len(rays), chunk)

    def run(lo):
        return _simulate_chunk(grid, rays.take(slice(lo, lo + chunk)), provider, head, M, n,
                               seed, drop_mode, sampling, max_range)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    if not parts:
        parts = [run(0)]

    def cat(key):
        return np.concatenate([q[key] for q in parts])

    samples = cat("samples") if sampling == "prior" else None
    return LidarPointCloud(
        rows=rays.rows.copy(), cols=rays.cols.copy(), depth=cat("depth"), points=cat("points"),
        intensity=cat("intensity"), drop_prob=cat("drop_prob"), dropped=cat("dropped"),
        miss=cat("miss"), sample_depths=samples,
        stats={"feature_evaluations": sum(q["evals"] for q in parts),
               "occupancy_tests": sum(q["tests"] for q in parts)},
    )


def raycast_cloud(grid: SemanticOccupancyGrid, rig: SensorRig) -> LidarPointCloud:
    """Point cloud from the hard ray caster (zero intensity, never dropped)."""
    rays = make_rig(rig)
    depth, _, hit = dda_raycast_batch(grid, rays, rig.max_range)
    miss = ~hit
    pts = rays.origins + np.nan_to_num(depth)[:, None] * rays.directions
    z = np.zeros(len(rays))
    return LidarPointCloud(rays.rows.copy(), rays.cols.copy(), depth, pts, z, z.copy(),
                           np.zeros(len(rays), dtype=bool), miss)

