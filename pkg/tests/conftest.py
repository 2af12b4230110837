from __future__ import annotations

import numpy as np
from hypothesis import HealthCheck, settings

from occscene.voxgrid import SemanticOccupancyGrid

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


def random_grid(seed: int, shape=(64, 64, 64), occupancy=0.1, num_classes=17,
                voxel_size=1.0, origin=None, clear_center=False) -> SemanticOccupancyGrid:
    """Random labels at the given occupancy; optionally free space around the origin."""
    rng = np.random.default_rng(seed)
    labels = np.where(rng.random(shape) < occupancy,
                      rng.integers(1, num_classes, shape), 0).astype(np.uint8)
    if origin is None:
        origin = tuple(-0.5 * n * voxel_size for n in shape)
    if clear_center:
        c = [n // 2 for n in shape]
        labels[c[0] - 2:c[0] + 3, c[1] - 2:c[1] + 3, c[2] - 2:c[2] + 3] = 0
    return SemanticOccupancyGrid(labels, voxel_size, origin, num_classes)
