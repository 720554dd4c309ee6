from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

# Levels k/255 snapped to a 2**-40 grid: sums and differences of levels are then exact
# in float64, which keeps yhat = y + z bitwise exact after discretisation.
LEVEL_GRID = 2.0 ** 40
EIGHT_BIT_LEVELS = np.round(np.arange(256, dtype=np.float64) / 255.0 * LEVEL_GRID) / LEVEL_GRID


def nearest_level_index(values: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Index of the nearest level for each value; ties go to the lower level."""
    upper = np.clip(np.searchsorted(levels, values, side="left"), 1, len(levels) - 1)
    lower = upper - 1
    go_up = (levels[upper] - values) < (values - levels[lower])
    index = np.where(go_up, upper, lower)
    if len(levels) == 1:
        return np.zeros_like(index)
    return index


class Image(BaseModel):
    """Grayscale intensities in [0, 1], optionally restricted to a discrete level set."""

    values: np.ndarray
    levels: Optional[np.ndarray] = None

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @field_validator("values", mode="before")
    @classmethod
    def _as_float_grid(cls, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"Image values must be 2-D, got shape {values.shape}")
        return values

    @field_validator("levels", mode="before")
    @classmethod
    def _sorted_levels(cls, levels) -> Optional[np.ndarray]:
        if levels is None:
            return None
        levels = np.asarray(levels, dtype=np.float64).reshape(-1)
        if levels.size == 0 or np.any(np.diff(levels) <= 0):
            raise ValueError("levels must be a non-empty strictly increasing sequence")
        return levels

    @model_validator(mode="after")
    def _check_range(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Image values must be finite")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError(f"Image values must lie in [0, 1], got [{self.values.min()}, {self.values.max()}]")
        if self.levels is not None:
            nearest = self.levels[nearest_level_index(self.values, self.levels)]
            if not np.array_equal(nearest, self.values):
                raise ValueError("Image values are not members of the declared level set")
        return self

    @classmethod
    def eight_bit(cls, values) -> "Image":
        return cls(values=values, levels=EIGHT_BIT_LEVELS)

    @classmethod
    def quantized(cls, values) -> "Image":
        """Round to the nearest 8-bit level."""
        codes = np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255)
        return cls.eight_bit(EIGHT_BIT_LEVELS[codes.astype(np.int64)])

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def is_eight_bit(self) -> bool:
        return self.levels is not None and np.array_equal(self.levels, EIGHT_BIT_LEVELS)

    def to_codes(self) -> np.ndarray:
        return np.clip(np.round(self.values * 255.0), 0, 255).astype(np.uint8)
