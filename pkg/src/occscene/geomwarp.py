"""Inverse depth warping of a reference latent and the noise prior built on it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ResolutionMismatch
from .gsrender import Camera, DepthMap

DEFAULT_LAMBDA = 0.3
_EDGE_TOL = 1e-6


@dataclass(frozen=True)
class LatentImage:
    """``(C, h, w)`` latent living at ``1/downsample`` of the camera resolution."""

    values: np.ndarray
    downsample: int = 1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3:
            raise FormatError(f"latent must be (C, h, w), got shape {v.shape}")
        if not np.isfinite(v).all():
            raise FormatError("latent values must be finite")
        if int(self.downsample) < 1:
            raise FormatError("downsample factor must be >= 1")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "downsample", int(self.downsample))

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass(frozen=True)
class NoiseSpec:
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    mode: str = "geometric"

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise FormatError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.mode not in ("vanilla", "geometric"):
            raise FormatError(f"unknown noise mode {self.mode!r}")


def pool_depth(depth: np.ndarray, factor: int) -> np.ndarray:
    """Average the strictly positive depths inside each ``factor x factor`` block."""
    h, w = depth.shape
    blocks = depth.reshape(h // factor, factor, w // factor, factor)
    valid = blocks > 0
    count = valid.sum(axis=(1, 3))
    total = np.where(valid, blocks, 0.0).sum(axis=(1, 3))
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def bilinear_sample(values: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``(C, h, w)`` at float column ``u`` / row ``v``; coordinates must be in range."""
    _, h, w = values.shape
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    return ((1 - fu) * (1 - fv) * values[:, v0, u0] + fu * (1 - fv) * values[:, v0, u1]
            + (1 - fu) * fv * values[:, v1, u0] + fu * fv * values[:, v1, u1])


def _check(z_c: LatentImage, depth: np.ndarray, cam_ref: Camera, cam_tgt: Camera):
    f = z_c.downsample
    h, w = z_c.resolution
    if depth.shape != (h * f, w * f):
        raise ResolutionMismatch(
            f"depth map {depth.shape} is not latent {(h, w)} x downsample {f}"
        )
    for cam in (cam_ref, cam_tgt):
        if (cam.height, cam.width) != depth.shape:
            raise ResolutionMismatch(
                f"camera {cam.name} resolution {(cam.height, cam.width)} differs from depth {depth.shape}"
            )


def warp_latent(z_c: LatentImage, depth: DepthMap | np.ndarray, cam_ref: Camera,
                cam_tgt: Camera, near: float = 1e-6) -> tuple[LatentImage, np.ndarray]:
    """Pull ``z_c`` from the reference view into the target view.

    ``depth`` is the target view's depth. Returns the warped latent and a
    boolean validity mask; invalid pixels are zero.
    """
    dvals = np.asarray(depth.values if isinstance(depth, DepthMap) else depth, dtype=np.float64)
    _check(z_c, dvals, cam_ref, cam_tgt)
    f = z_c.downsample
    h, w = z_c.resolution
    d = pool_depth(dvals, f)

    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    # latent pixel centre -> full-resolution image coordinate
    x = (uu + 0.5) * f - 0.5
    y = (vv + 0.5) * f - 0.5
    pts = np.stack([(x - cam_tgt.cx) / cam_tgt.fx * d, (y - cam_tgt.cy) / cam_tgt.fy * d, d], -1)
    rot, trans = cam_tgt.relative_to(cam_ref)
    pr = pts.reshape(-1, 3) @ rot.T + trans
    zr = pr[:, 2]
    zsafe = np.where(zr > near, zr, 1.0)
    xr = cam_ref.fx * pr[:, 0] / zsafe + cam_ref.cx
    yr = cam_ref.fy * pr[:, 1] / zsafe + cam_ref.cy
    ur = (xr + 0.5) / f - 0.5
    vr = (yr + 0.5) / f - 0.5
    valid = ((d.ravel() > 0) & (zr > near)
             & (ur >= -_EDGE_TOL) & (ur <= w - 1 + _EDGE_TOL)
             & (vr >= -_EDGE_TOL) & (vr <= h - 1 + _EDGE_TOL))
    out = np.zeros((z_c.values.shape[0], h * w))
    if valid.any():
        out[:, valid] = bilinear_sample(z_c.values, ur[valid], vr[valid])
    return LatentImage(out.reshape(-1, h, w), f), valid.reshape(h, w)


def gaussian_noise(shape, seed: int) -> np.ndarray:
    """Standard normal noise from a counter-based (Philox) stream keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(key=int(seed))).standard_normal(shape)


def build_noise_prior(z_c: LatentImage, depth, cam_ref: Camera | None, cam_tgt: Camera | None,
                      spec: NoiseSpec = NoiseSpec(), noise: np.ndarray | None = None
                      ) -> LatentImage:
    """``lam * prior + N(0, I)``; the prior is ``z_c`` (vanilla) or its warp (geometric).

    ``noise`` overrides the seeded draw, e.g. zeros to inspect the prior term.
    """
    if noise is None:
        noise = gaussian_noise(z_c.values.shape, spec.seed)
    elif np.shape(noise) != z_c.values.shape:
        raise ResolutionMismatch(f"noise shape {np.shape(noise)} != latent {z_c.values.shape}")
    if spec.mode == "vanilla":
        prior = z_c.values
    else:
        prior = warp_latent(z_c, depth, cam_ref, cam_tgt)[0].values
    return LatentImage(spec.lam * prior + noise, z_c.downsample)
