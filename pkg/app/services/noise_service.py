import numpy as np

from app.core.errors import ConfigurationError
from app.schemas.image import Image
from app.schemas.noise import NoiseSpec
from app.utils.logger import logger

POISSON_CAP = 1.0
CLAMP_WARN_FRACTION = 0.01


def _clamped(values: np.ndarray, upper: float, label: str) -> np.ndarray:
    outside = np.count_nonzero((values < 0.0) | (values > upper))
    if values.size and outside / values.size > CLAMP_WARN_FRACTION:
        logger.warning(f"{label}: clamping changed {outside / values.size:.2%} of pixels")
    return np.clip(values, 0.0, upper)


def add_gaussian(x: Image, sigma: float, rng: np.random.Generator) -> Image:
    """y = x + n with n ~ N(0, (sigma/256)^2) per pixel; the result is continuous."""
    if sigma < 0:
        raise ConfigurationError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return Image(values=x.values.copy())
    noisy = x.values + rng.normal(0.0, sigma / 256.0, size=x.shape)
    return Image(values=_clamped(noisy, 1.0, "gaussian"))


def add_poisson(x: Image, lam: float, rng: np.random.Generator) -> Image:
    """y = Poisson(lam * x) / lam."""
    if lam <= 0:
        raise ConfigurationError(f"lambda must be positive, got {lam}")
    counts = rng.poisson(lam * x.values)
    return Image(values=_clamped(counts / lam, POISSON_CAP, "poisson"))


def add_salt_pepper(x: Image, p: float, rng: np.random.Generator) -> Image:
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"p must lie in [0, 1], got {p}")
    corrupted = rng.random(x.shape) < p
    salt = rng.random(x.shape) < 0.5
    values = np.where(corrupted, np.where(salt, 1.0, 0.0), x.values)
    levels = None
    if x.levels is not None:
        levels = np.union1d(x.levels, [0.0, 1.0])
    return Image(values=values, levels=levels)


def add_mixed(x: Image, lam: float, sigma: float, rng: np.random.Generator) -> Image:
    """Poisson step followed by an additive Gaussian step."""
    return add_gaussian(add_poisson(x, lam, rng), sigma, rng)


class NoiseService:
    def __init__(self, spec: NoiseSpec):
        self.spec = spec

    def apply(self, x: Image, rng: np.random.Generator) -> Image:
        if self.spec.kind == "gaussian":
            return add_gaussian(x, self.spec.sigma, rng)
        if self.spec.kind == "poisson":
            return add_poisson(x, self.spec.lam, rng)
        if self.spec.kind == "saltpepper":
            return add_salt_pepper(x, self.spec.p, rng)
        return add_mixed(x, self.spec.lam, self.spec.sigma, rng)

    def apply_quantized(self, x: Image, rng: np.random.Generator) -> Image:
        """Noisy image as stored on disk: rounded to 8-bit levels."""
        return Image.quantized(self.apply(x, rng).values)
