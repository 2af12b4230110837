"""Occupancy-centric scene toolkit: voxel grids, Gaussian splat rendering, LiDAR
simulation, diffusion plumbing for BEV editing, and evaluation metrics."""

__version__ = "0.1.0"

from .errors import OccSceneError  # noqa: E402,F401
