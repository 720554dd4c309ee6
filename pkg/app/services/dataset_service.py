from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from app.core.config import settings
from app.core.errors import ConfigurationError
from app.core.rng import derive_rng
from app.schemas.image import Image


def _synthetic_image(size: int, rng: np.random.Generator) -> Image:
    """Piecewise-smooth scene: shaded background, flat rectangles and ellipses, a few textured patches."""
    rows, cols = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    canvas = rng.uniform(0.2, 0.8) + rng.uniform(0.05, 0.3) * (np.cos(angle) * rows + np.sin(angle) * cols - 0.5)

    for _ in range(int(rng.integers(2, 6))):
        top, left = rng.uniform(-0.2, 0.9, size=2)
        height, width = rng.uniform(0.1, 0.6, size=2)
        inside = (rows >= top) & (rows < top + height) & (cols >= left) & (cols < left + width)
        canvas = np.where(inside, rng.uniform(0.0, 1.0), canvas)

    for _ in range(int(rng.integers(1, 5))):
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.05, 0.35, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = rows - cy, cols - cx
        u = (np.cos(theta) * dx + np.sin(theta) * dy) / rx
        v = (-np.sin(theta) * dx + np.cos(theta) * dy) / ry
        canvas = np.where(u ** 2 + v ** 2 <= 1.0, rng.uniform(0.0, 1.0), canvas)

    for _ in range(int(rng.integers(0, 3))):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        radius = rng.uniform(0.1, 0.3)
        frequency = rng.uniform(4, 12) * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        direction = rng.uniform(0, np.pi)
        patch = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
        wave = 0.5 + 0.4 * np.sin(frequency * (np.cos(direction) * rows + np.sin(direction) * cols) + phase)
        canvas = np.where(patch, wave, canvas)

    return Image.quantized(np.clip(canvas, 0.0, 1.0))


def gen_synthetic_dataset(count: int, size: int, seed: int, workers: Optional[int] = None) -> list[Image]:
    """Deterministic 8-bit images; image ``i`` depends only on ``(seed, i)``."""
    if count <= 0:
        raise ConfigurationError(f"count must be positive, got {count}")
    if size < 8:
        raise ConfigurationError(f"size must be at least 8, got {size}")
    with ThreadPoolExecutor(max_workers=workers or settings.workers) as pool:
        return list(pool.map(lambda i: _synthetic_image(size, derive_rng(seed, "gen-data", i)), range(count)))
