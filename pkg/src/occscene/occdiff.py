"""Diffusion plumbing around a pluggable denoiser: schedules, DDIM, guidance, patching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import BadRange, DimMismatch, FormatError, ShapeMismatch, StepRange
from .voxgrid import BevLayout

DEFAULT_STEPS = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 2e-2
DEFAULT_PATCH = 2


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; ``alpha_bar(0)`` is 1 and ``alpha_bar(t)`` for t in 1..steps."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.array(self.betas, dtype=np.float64).ravel()
        if len(b) < 1 or not ((b > 0) & (b < 1)).all() or (np.diff(b) <= 0).any():
            raise BadRange("betas must lie in (0, 1) and increase strictly")
        ab = np.cumprod(1.0 - b)
        if ab[-1] <= 0 or (np.diff(ab) >= 0).any():
            raise BadRange("cumulative alpha underflows; shorten the schedule or lower beta_max")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    @property
    def steps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def make_schedule(steps: int = DEFAULT_STEPS, beta_min: float = DEFAULT_BETA_MIN,
                  beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    if steps < 1:
        raise BadRange(f"steps must be >= 1, got {steps}")
    if not 0 < beta_min < beta_max < 1:
        raise BadRange(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    return NoiseSchedule(np.linspace(beta_min, beta_max, steps))


@dataclass(frozen=True)
class LatentVolume:
    """``(T, C, h, w)`` latent frames with optional per-frame timestamps."""

    values: np.ndarray
    timestamps: tuple | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 3:
            v = v[None]
        if v.ndim != 4 or v.shape[2] < 1 or v.shape[3] < 1:
            raise FormatError(f"latent volume must be (T, C, h, w), got {v.shape}")
        if not np.isfinite(v).all():
            raise FormatError("latent volume must be finite")
        ts = self.timestamps
        if ts is not None:
            ts = tuple(float(x) for x in ts)
            if len(ts) != v.shape[0]:
                raise DimMismatch(f"{len(ts)} timestamps for {v.shape[0]} frames")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "timestamps", ts)

    @property
    def shape(self):
        return self.values.shape


# --------------------------------------------------------------------------- denoisers


class Denoiser(Protocol):
    def __call__(self, z: np.ndarray, t: int, cond: np.ndarray | None) -> np.ndarray: ...


class ZeroDenoiser:
    """Predicts zero noise everywhere."""

    def __call__(self, z, t, cond):
        return np.zeros_like(z)


class LinearDenoiser:
    """Per-pixel channel mixing ``eps = A z`` with a seeded ``C x C`` matrix."""

    def __init__(self, channels: int, seed: int = 0, scale: float = 0.1):
        rng = np.random.default_rng(seed)
        self.A = scale * rng.standard_normal((channels, channels)) / np.sqrt(channels)

    def __call__(self, z, t, cond):
        return np.einsum("oc,tchw->tohw", self.A, z)


class ConditionAdditiveDenoiser(LinearDenoiser):
    """``A z + B cond``: the linear toy plus a projection of the BEV channels.

    ``cond`` is a ``(C_b, h, w)`` stack shared by all frames; ``None`` drops it.
    """

    def __init__(self, channels: int, cond_channels: int, seed: int = 0, scale: float = 0.1,
                 cond_scale: float = 0.5):
        super().__init__(channels, seed, scale)
        rng = np.random.default_rng([seed, 1])
        self.B = cond_scale * rng.standard_normal((channels, cond_channels))

    def __call__(self, z, t, cond):
        out = super().__call__(z, t, cond)
        if cond is not None:
            if cond.shape[0] != self.B.shape[1] or cond.shape[1:] != z.shape[2:]:
                raise DimMismatch(f"condition {cond.shape} does not fit latent {z.shape}")
            out = out + np.einsum("ob,bhw->ohw", self.B, cond)[None]
        return out


TOY_DENOISERS = ("zero", "linear", "cond_additive")


def make_toy_denoiser(name: str, channels: int, cond_channels: int = 0, seed: int = 0):
    if name == "zero":
        return ZeroDenoiser()
    if name == "linear":
        return LinearDenoiser(channels, seed)
    if name == "cond_additive":
        return ConditionAdditiveDenoiser(channels, cond_channels, seed)
    raise FormatError(f"unknown denoiser {name!r}; expected one of {TOY_DENOISERS}")


# --------------------------------------------------------------------------- guidance and DDIM


def cfg_mix(eps_cond, eps_uncond, g: float) -> np.ndarray:
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeMismatch(f"{eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + g * (eps_cond - eps_uncond)


def _predict(denoiser, z, t, cond, g):
    eps = denoiser(z, t, cond)
    if g != 1.0:
        eps = cfg_mix(eps, denoiser(z, t, None), g)
    return eps


def ddim_timesteps(schedule: NoiseSchedule, num_steps: int) -> list[int]:
    """Uniformly strided sub-schedule ``[0, T//N, 2T//N, ..., T]`` (``tau_0 = 0``)."""
    T = schedule.steps
    if not 0 <= num_steps <= T:
        raise StepRange(f"num_steps must be in [0, {T}], got {num_steps}")
    if num_steps == 0:
        return [0]
    return [k * T // num_steps for k in range(num_steps + 1)]


def _values(z) -> np.ndarray:
    return (z.values if isinstance(z, LatentVolume) else np.asarray(z, dtype=np.float64)).copy()


def ddim_step(z, eps, ab_from: float, ab_to: float) -> np.ndarray:
    """Deterministic (eta = 0) DDIM move between two cumulative-alpha levels."""
    x0 = (z - np.sqrt(1.0 - ab_from) * eps) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * x0 + np.sqrt(1.0 - ab_to) * eps


def ddim_sample(denoiser, z_T, condition, schedule: NoiseSchedule, num_steps: int,
                g: float = 1.0) -> LatentVolume:
    taus = ddim_timesteps(schedule, num_steps)
    z = _values(z_T)
    for k in range(len(taus) - 1, 0, -1):
        t, t_prev = taus[k], taus[k - 1]
        eps = _predict(denoiser, z, t, condition, g)
        z = ddim_step(z, eps, schedule.alpha_bar(t), schedule.alpha_bar(t_prev))
    return LatentVolume(z)


def ddim_invert(denoiser, z_0, condition, schedule: NoiseSchedule, num_steps: int,
                g: float = 1.0, refine: int = 50, tol: float = 1e-12) -> LatentVolume:
    """Reverse traversal of :func:`ddim_sample`.

    Each step solves ``z_t`` so that the sampling step from ``z_t`` lands on the
    current latent, by fixed-point iteration on the noise prediction at ``z_t``
    (``refine=0`` gives the plain one-shot inversion).
    """
    taus = ddim_timesteps(schedule, num_steps)
    z = _values(z_0)
    for k in range(1, len(taus)):
        t_prev, t = taus[k - 1], taus[k]
        ab_prev, ab = schedule.alpha_bar(t_prev), schedule.alpha_bar(t)
        eps = _predict(denoiser, z, t, condition, g)
        nxt = ddim_step(z, eps, ab_prev, ab)
        for _ in range(refine):
            eps = _predict(denoiser, nxt, t, condition, g)
            cand = ddim_step(z, eps, ab_prev, ab)
            done = np.max(np.abs(cand - nxt), initial=0.0) <= tol
            nxt = cand
            if done:
                break
        z = nxt
    return LatentVolume(z)


# --------------------------------------------------------------------------- BEV conditioning and patching


def bev_channels(layout: BevLayout, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour downsample of the class codes into a one-hot ``(palette, h, w)`` stack."""
    h, w = size
    H, W = layout.dims
    ri = np.minimum(((np.arange(h) + 0.5) * H / h).astype(np.int64), H - 1)
    ci = np.minimum(((np.arange(w) + 0.5) * W / w).astype(np.int64), W - 1)
    codes = layout.codes[np.ix_(ri, ci)]
    return (codes[None] == np.arange(layout.palette_size)[:, None, None]).astype(np.float64)


@dataclass(frozen=True)
class TokenGrid:
    tokens: np.ndarray  # (L, E_d)
    patch: int
    height: int
    width: int
    channels: int

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


def patchify(frame, bev=None, patch: int = DEFAULT_PATCH, weights=None) -> TokenGrid:
    """Concatenate latent and BEV channels, cut ``P x P`` patches row-major and embed.

    A patch flattens as ``(channel, row, col)``. ``weights`` is a
    ``(C * P * P, E_d)`` matrix; ``None`` is the identity embedder.
    """
    x = np.asarray(frame, dtype=np.float64)
    if bev is not None:
        bev = np.asarray(bev, dtype=np.float64)
        if bev.shape[1:] != x.shape[1:]:
            raise DimMismatch(f"BEV {bev.shape} does not match latent {x.shape}")
        x = np.concatenate([x, bev], axis=0)
    c, h, w = x.shape
    if patch < 1 or h % patch or w % patch:
        raise DimMismatch(f"patch {patch} does not divide {h}x{w}")
    p = (x.reshape(c, h // patch, patch, w // patch, patch)
         .transpose(1, 3, 0, 2, 4).reshape(-1, c * patch * patch))
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape[0] != p.shape[1]:
            raise DimMismatch(f"embedder expects {weights.shape[0]} inputs, patches have {p.shape[1]}")
        p = p @ weights
    return TokenGrid(p, patch, h, w, c)


def unpatchify(grid: TokenGrid, weights=None, channels: int | None = None) -> np.ndarray:
    """Inverse of :func:`patchify`; ``channels`` keeps only the leading channels."""
    t = grid.tokens
    c, P = grid.channels, grid.patch
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape[0] != t.shape[1]:
            raise DimMismatch(f"un-embedder expects E_d={weights.shape[0]}, tokens have {t.shape[1]}")
        t = t @ weights
    if t.shape[1] != c * P * P:
        raise DimMismatch(f"token width {t.shape[1]} != {c}*{P}*{P}")
    hp, wp = grid.height // P, grid.width // P
    if t.shape[0] != hp * wp:
        raise DimMismatch(f"{t.shape[0]} tokens for a {hp}x{wp} patch grid")
    x = t.reshape(hp, wp, c, P, P).transpose(2, 0, 3, 1, 4).reshape(c, grid.height, grid.width)
    return x if channels is None else x[:channels]


# --------------------------------------------------------------------------- editing and forecasting


def edit_pipeline(z_ori, B_ori: BevLayout, B_new: BevLayout, denoiser, schedule: NoiseSchedule,
                  steps: int, g: float = 1.0) -> LatentVolume:
    """Invert the latent under the original layout, then resample under the new one."""
    z = _values(z_ori)
    if B_ori.dims != B_new.dims or B_ori.palette_size != B_new.palette_size:
        raise DimMismatch(f"layouts differ: {B_ori.dims} vs {B_new.dims}")
    size = z.shape[2:]
    eps_ori = ddim_invert(denoiser, z, bev_channels(B_ori, size), schedule, steps, g)
    return ddim_sample(denoiser, eps_ori, bev_channels(B_new, size), schedule, steps, g)


def forecast_pack(clean, noise, schedule: NoiseSchedule | None = None, t: int | None = None,
                  future=None) -> tuple[LatentVolume, np.ndarray]:
    """Stack ``T_c`` clean conditional frames ahead of ``T_f`` future frames.

    Future frames are ``noise`` as given, or ``future`` noised to step ``t``
    when both are supplied. The mask is 0 on conditional frames, 1 on future ones.
    """
    clean = _values(clean)
    noise = _values(noise)
    if clean.ndim == 3:
        clean = clean[None]
    if noise.ndim == 3:
        noise = noise[None]
    if len(clean) < 1 or len(noise) < 1:
        raise DimMismatch("need at least one conditional and one future frame")
    if clean.shape[1:] != noise.shape[1:]:
        raise DimMismatch(f"frame shapes differ: {clean.shape[1:]} vs {noise.shape[1:]}")
    frames = noise
    if future is not None:
        if schedule is None or t is None:
            raise FormatError("noising future frames needs a schedule and a step")
        future = _values(future)
        if future.shape != noise.shape:
            raise DimMismatch(f"future {future.shape} vs noise {noise.shape}")
        ab = schedule.alpha_bar(t)
        frames = np.sqrt(ab) * future + np.sqrt(1.0 - ab) * noise
    mask = np.concatenate([np.zeros(len(clean)), np.ones(len(frames))])
    return LatentVolume(np.concatenate([clean, frames])), mask
