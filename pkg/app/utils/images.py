import numpy as np

from app.core.errors import ShapeError


def random_crop_origin(shape: tuple[int, int], size: int, rng: np.random.Generator) -> tuple[int, int]:
    height, width = shape
    if size > height or size > width:
        raise ShapeError(f"Crop {size} does not fit image {height}x{width}")
    return int(rng.integers(0, height - size + 1)), int(rng.integers(0, width - size + 1))


def to_display(residual: np.ndarray) -> np.ndarray:
    """Map a signed residual to [0, 1] with zero at mid-gray and +-3 RMS at the ends."""
    rms = float(np.sqrt(np.mean(residual ** 2)))
    if rms == 0.0:
        return np.full(residual.shape, 0.5)
    return np.clip(0.5 + residual / (6.0 * rms), 0.0, 1.0)
