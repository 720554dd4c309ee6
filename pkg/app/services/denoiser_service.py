from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from app.core.errors import ConfigurationError, ImageTooSmallError, MissingArtifactError, ShapeError
from app.db.pgm import load_pgm
from app.schemas.denoiser import DenoiserSpec
from app.schemas.image import Image
from app.utils.logger import logger

_NEIGHBOURS = np.ones((3, 3))


def linear_filter(y: Image, window: int = 5) -> Image:
    """Mean over a ``window`` x ``window`` neighbourhood with replicated borders."""
    if y.height < window or y.width < window:
        raise ImageTooSmallError(f"Linear filter needs at least {window}x{window} pixels, got {y.height}x{y.width}")
    smoothed = ndimage.uniform_filter(y.values, size=window, mode="nearest")
    return Image(values=np.clip(smoothed, y.values.min(), y.values.max()))


def median_filter(y: Image, window: int = 3) -> Image:
    if window % 2 == 0 or window < 1:
        raise ConfigurationError(f"Median window must be odd, got {window}")
    return Image(values=ndimage.median_filter(y.values, size=window, mode="nearest"), levels=y.levels)


def iterative_mean_filter(y: Image, max_iters: int = 10) -> Image:
    """Replace extreme-valued pixels by the mean of their trusted 3x3 neighbours, repeatedly.

    Pixels at exactly 0 or 1 are suspects. Each pass fills every suspect that has at
    least one trusted neighbour; filled pixels become trusted for the next pass.
    """
    values = y.values.copy()
    suspect = (values == 0.0) | (values == 1.0)
    for iteration in range(max_iters):
        if not suspect.any():
            break
        trusted = (~suspect).astype(np.float64)
        sums = ndimage.convolve(values * trusted, _NEIGHBOURS, mode="constant", cval=0.0)
        counts = ndimage.convolve(trusted, _NEIGHBOURS, mode="constant", cval=0.0)
        fillable = suspect & (counts > 0)
        if not fillable.any():
            break
        values[fillable] = sums[fillable] / counts[fillable]
        suspect &= ~fillable
    if suspect.any():
        logger.warning(f"Iterative mean filter left {int(suspect.sum())} pixels without trusted neighbours; filling mid-gray")
        values[suspect] = 0.5
    return Image(values=values)


class ExternalDenoiser:
    """Reads precomputed outputs named by a pattern next to (or beside) the noisy inputs."""

    def __init__(self, directory: Optional[Path] = None, pattern: str = "{stem}.denoised.pgm"):
        self.directory = Path(directory) if directory is not None else None
        self.pattern = pattern

    def expected_path(self, noisy_path) -> Path:
        noisy_path = Path(noisy_path)
        stem = noisy_path.name[: -len(".pgm")] if noisy_path.name.endswith(".pgm") else noisy_path.stem
        return (self.directory or noisy_path.parent) / self.pattern.format(stem=stem)

    def load(self, noisy_path, expected_shape: tuple[int, int]) -> Image:
        path = self.expected_path(noisy_path)
        if not path.exists():
            raise MissingArtifactError(f"External denoiser output not found, expected {path}", path=path)
        image = load_pgm(path)
        if image.shape != tuple(expected_shape):
            raise ShapeError(f"External output {path} has shape {image.shape}, noisy input has {tuple(expected_shape)}")
        return image


def external_denoiser(noisy_path, expected_shape: tuple[int, int], directory=None, pattern="{stem}.denoised.pgm") -> Image:
    return ExternalDenoiser(directory, pattern).load(noisy_path, expected_shape)


class DenoiserService:
    def __init__(self, spec: DenoiserSpec):
        self.spec = spec
        self.external = ExternalDenoiser(spec.external_dir, spec.pattern) if spec.kind == "external" else None

    @property
    def identifier(self) -> str:
        return self.spec.identifier

    def apply(self, image: Image, source_path=None) -> Image:
        if self.spec.kind == "linear":
            return linear_filter(image, self.spec.linear_window)
        if self.spec.kind == "median":
            return median_filter(image, self.spec.window)
        if self.spec.kind == "imf":
            return iterative_mean_filter(image, self.spec.max_iters)
        if source_path is None:
            raise MissingArtifactError("External denoiser needs the path of the noisy input to locate its output")
        return self.external.load(source_path, image.shape)
