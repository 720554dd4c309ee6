from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from app.core.cache import ArtifactCache, artifact_cache
from app.core.config import settings
from app.core.errors import CalibrationError, ConfigurationError, MissingArtifactError
from app.core.rng import derive_rng
from app.db.pgm import save_pgm
from app.schemas.aux import AuxConfig, AuxSample
from app.schemas.image import Image, nearest_level_index
from app.schemas.noise import NoiseSpec
from app.utils.logger import logger

MOMENT_FLOOR = 1e-12
CONDITION_TWO_RATIO = 0.25


def discr(values: np.ndarray, levels: Optional[np.ndarray]) -> np.ndarray:
    """Round every element to the nearest level (ties to the lower one); identity without levels."""
    if levels is None:
        return np.asarray(values, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    return levels[nearest_level_index(np.asarray(values, dtype=np.float64), levels)]


def make_aux(y: Image, cfg: AuxConfig, rng: np.random.Generator) -> AuxSample:
    """Draw ``yhat = discr(y + M * r)`` and ``z = yhat - y`` for one image."""
    mask = rng.random(y.shape) < cfg.density
    if cfg.r_mode == "gaussian":
        r = rng.normal(0.0, cfg.r_std, size=y.shape)
    else:
        r = np.full(y.shape, cfg.r_value)
    perturbed = y.values + np.where(mask, r, 0.0)

    if cfg.discr and y.levels is not None:
        yhat = discr(perturbed, y.levels)
        # levels live on an exact dyadic grid, so this difference is exact
        z = yhat - y.values
        return AuxSample(y=y, z=z, yhat=Image(values=yhat, levels=y.levels), mask=mask.astype(np.float64))

    z = np.clip(perturbed, 0.0, 1.0) - y.values
    yhat = y.values + z
    return AuxSample(y=y, z=z, yhat=Image(values=yhat), mask=mask.astype(np.float64))


def f_apply(z: np.ndarray, order: int, t: float) -> np.ndarray:
    """f_l(z) = t_l * z**l."""
    if order not in (1, 2, 3):
        raise ConfigurationError(f"Order must be 1, 2 or 3, got {order}")
    if t <= 0:
        raise ConfigurationError(f"Scaling constant must be positive, got {t}")
    return t * np.asarray(z) ** order


def targets(z: np.ndarray, orders: Sequence[int], t: Sequence[float]) -> np.ndarray:
    """Stack f_l(z) along a new leading channel axis."""
    return np.stack([f_apply(z, order, scale) for order, scale in zip(orders, t)], axis=-3)


def check_condition_two(aux: AuxConfig, noise: NoiseSpec) -> None:
    """The auxiliary signal must stay small against the noise it is added on top of."""
    aux_power = aux.second_moment()
    noise_power = noise.variance()
    if aux_power >= CONDITION_TWO_RATIO * noise_power:
        raise ConfigurationError(
            f"Auxiliary power {aux_power:.3g} is not small against noise variance {noise_power:.3g} "
            f"for {noise.describe()}; lower aux.density or aux.r_std"
        )


def find_ambiguous_pixels(sample: AuxSample) -> Optional[tuple[tuple[int, int], tuple[int, int]]]:
    """Two pixels with equal yhat but different z, or None.

    Their existence shows z is not a function of yhat_i alone.
    """
    flat_yhat = sample.yhat.values.reshape(-1)
    flat_z = sample.z.reshape(-1)
    moved = np.flatnonzero(flat_z != 0)
    for index in moved:
        partners = np.flatnonzero((flat_yhat == flat_yhat[index]) & (flat_z != flat_z[index]))
        if partners.size:
            width = sample.y.width
            other = int(partners[0])
            return (int(index) // width, int(index) % width), (other // width, other % width)
    return None


# --- scaling calibration ---

class Predictor(Protocol):
    def predict(self, yhat: np.ndarray) -> np.ndarray: ...


class PilotTrainer(Protocol):
    def pilot(self, images: Sequence[Image], t: Sequence[float], steps: int) -> Predictor: ...

    def holdout_samples(self, images: Sequence[Image]) -> list[AuxSample]: ...


def measure_moments(predictor: Predictor, samples: Sequence[AuxSample]) -> list[float]:
    """m_l = mean over samples of the per-pixel mean of E(yhat)_l squared."""
    totals = None
    for sample in samples:
        output = predictor.predict(sample.yhat.values)
        per_order = np.mean(np.asarray(output, dtype=np.float64) ** 2, axis=(-2, -1)).reshape(-1)
        totals = per_order if totals is None else totals + per_order
    if totals is None:
        raise CalibrationError("No held-out samples to measure")
    return [float(value) for value in totals / len(samples)]


def t_from_moments(moments: Sequence[float]) -> list[float]:
    scales = []
    for order_index, moment in enumerate(moments):
        if not np.isfinite(moment) or moment < MOMENT_FLOOR:
            raise CalibrationError(
                f"Second moment {moment:.3g} of estimator output {order_index} is below {MOMENT_FLOOR:g}; "
                "the auxiliary signal is degenerate"
            )
        scales.append(float(1.0 / np.sqrt(moment)))
    return scales


def calibrate_t(images: Sequence[Image], orders: Sequence[int], prototype: PilotTrainer, pilot_steps: int) -> list[float]:
    """Pilot-train with t = 1, then set t_l = 1 / sqrt(m_l) from held-out outputs."""
    if not images:
        raise CalibrationError("Calibration needs at least one image")
    pilot = prototype.pilot(images, [1.0] * len(orders), pilot_steps)
    moments = measure_moments(pilot, prototype.holdout_samples(images))
    scales = t_from_moments(moments)
    logger.info(f"Calibrated scaling constants t={['%.4g' % s for s in scales]} from moments {['%.3g' % m for m in moments]}")
    return scales


# --- persisted samples ---

def aux_stem(stem: str, index: int) -> str:
    return f"{stem}_a{index}"


def save_aux(directory, stem: str, sample: AuxSample) -> list[Path]:
    """``<stem>.aux.npz`` holds the exact arrays; ``<stem>.yhat.pgm`` is what external denoisers read."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = directory / f"{stem}.aux.npz"
    temp = directory / f"{stem}.aux.tmp.npz"
    np.savez(temp, y=sample.y.values, z=sample.z, yhat=sample.yhat.values, mask=sample.mask,
             levels=sample.y.levels if sample.y.levels is not None else np.zeros(0))
    temp.replace(arrays)
    return [arrays, save_pgm(directory / f"{stem}.yhat.pgm", sample.yhat)]


def load_aux(directory, stem: str) -> AuxSample:
    path = Path(directory) / f"{stem}.aux.npz"
    if not path.exists():
        raise MissingArtifactError(f"Auxiliary sample not found: {path}", path=path)
    with np.load(path) as data:
        levels = data["levels"] if data["levels"].size else None
        y = Image(values=data["y"], levels=levels)
        yhat_levels = levels if levels is not None and np.isin(data["yhat"], levels).all() else None
        return AuxSample(y=y, z=data["z"], yhat=Image(values=data["yhat"], levels=yhat_levels), mask=data["mask"])


def list_aux_stems(directory) -> list[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingArtifactError(f"Directory not found: {directory}", path=directory)
    stems = sorted(p.name[: -len(".aux.npz")] for p in directory.glob("*.aux.npz") if ".tmp." not in p.name)
    if not stems:
        raise MissingArtifactError(f"No auxiliary samples in {directory}", path=directory)
    return stems


# --- training pool ---

@dataclass(frozen=True)
class AuxEntry:
    stem: str
    sample: AuxSample
    denoised: np.ndarray
    estimate: np.ndarray


class AuxPool:
    """Fixed yhat realizations with D(yhat) and the estimator maps computed once on full images."""

    def __init__(self, entries: Sequence[AuxEntry]):
        if not entries:
            raise MissingArtifactError("Auxiliary pool is empty")
        self.entries = list(entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def orders(self) -> int:
        return self.entries[0].estimate.shape[0]

    def split(self, holdout_fraction: float) -> tuple["AuxPool", Optional["AuxPool"]]:
        """Hold out whole source images so train and held-out crops never share a scene."""
        sources = sorted({entry.stem.rsplit("_a", 1)[0] for entry in self.entries})
        count = int(round(len(sources) * holdout_fraction))
        if count == 0 or count >= len(sources):
            return self, None
        held = set(sources[-count:])
        train = [e for e in self.entries if e.stem.rsplit("_a", 1)[0] not in held]
        heldout = [e for e in self.entries if e.stem.rsplit("_a", 1)[0] in held]
        return AuxPool(train), AuxPool(heldout)


def make_aux_pool(
    stems: Sequence[str],
    samples: Sequence[AuxSample],
    denoise: Callable[[str, AuxSample], np.ndarray],
    estimator: Predictor,
    cache: Optional[ArtifactCache] = None,
    cache_tag: str = "",
) -> AuxPool:
    cache = cache or artifact_cache

    def build(item: tuple[str, AuxSample]) -> AuxEntry:
        stem, sample = item
        denoised = cache.get_or_compute(f"denoised:{cache_tag}:{stem}", lambda: denoise(stem, sample))
        estimate = cache.get_or_compute(f"estimate:{cache_tag}:{stem}", lambda: estimator.predict(sample.yhat.values))
        return AuxEntry(stem=stem, sample=sample, denoised=np.asarray(denoised), estimate=np.asarray(estimate))

    with ThreadPoolExecutor(max_workers=settings.workers) as pool:
        entries = list(pool.map(build, zip(stems, samples)))
    logger.info(f"Built auxiliary pool with {len(entries)} entries")
    return AuxPool(entries)


def draw_aux_samples(images: Sequence[Image], stems: Sequence[str], cfg: AuxConfig, seed: int, per_image: int):
    """``per_image`` realizations per image; realization ``j`` of image ``i`` uses substream ``(seed, 'aux', i*per_image+j)``."""
    out_stems, samples = [], []
    for i, (stem, image) in enumerate(zip(stems, images)):
        for j in range(per_image):
            out_stems.append(aux_stem(stem, j))
            samples.append(make_aux(image, cfg, derive_rng(seed, "aux", i * per_image + j)))
    return out_stems, samples
