import numpy as np
import pytest

from app.core.errors import ConfigurationError
from app.core.rng import derive_rng
from app.schemas.image import Image
from app.schemas.noise import NoiseSpec
from app.services.noise_service import NoiseService, add_gaussian, add_mixed, add_poisson, add_salt_pepper

MID_GRAY = Image(values=np.full((1000, 1000), 0.5))


def test_gaussian_noise_has_the_requested_spread(rng):
    noisy = add_gaussian(MID_GRAY, 25.0, rng).values
    residual = noisy - 0.5
    assert abs(residual.mean()) < 5e-4
    assert residual.std() == pytest.approx(25.0 / 256.0, rel=0.01)


def test_gaussian_noise_is_uncorrelated_between_neighbours(rng):
    residual = add_gaussian(MID_GRAY, 25.0, rng).values - 0.5
    horizontal = np.corrcoef(residual[:, :-1].reshape(-1), residual[:, 1:].reshape(-1))[0, 1]
    vertical = np.corrcoef(residual[:-1].reshape(-1), residual[1:].reshape(-1))[0, 1]
    assert abs(horizontal) < 0.01 and abs(vertical) < 0.01


def test_zero_sigma_returns_the_clean_image(rng):
    assert np.array_equal(add_gaussian(MID_GRAY, 0.0, rng).values, MID_GRAY.values)


def test_poisson_noise_is_unbiased_with_intensity_over_lambda_variance(rng):
    noisy = add_poisson(MID_GRAY, 30.0, rng).values
    counts = noisy * 30.0
    assert noisy.mean() == pytest.approx(0.5, abs=2e-3)
    assert counts.var() == pytest.approx(counts.mean(), rel=0.02)
    assert noisy.max() <= 1.0


def test_salt_and_pepper_corrupts_the_requested_fraction(rng):
    noisy = add_salt_pepper(MID_GRAY, 0.3, rng).values
    corrupted = (noisy == 0.0) | (noisy == 1.0)
    assert corrupted.mean() == pytest.approx(0.3, abs=3e-3)
    assert (noisy == 1.0).sum() / corrupted.sum() == pytest.approx(0.5, abs=0.01)
    assert np.all(noisy[~corrupted] == 0.5)


def test_salt_and_pepper_extends_the_level_set(rng, gray_image):
    noisy = add_salt_pepper(gray_image, 0.5, rng)
    assert noisy.levels is not None
    assert {0.0, 1.0} <= set(noisy.levels.tolist())



def test_mixed_noise_without_gaussian_part_is_poisson_noise():
    mixed = add_mixed(MID_GRAY, 30.0, 0.0, derive_rng(1, "noise"))
    poisson = add_poisson(MID_GRAY, 30.0, derive_rng(1, "noise"))
    assert np.array_equal(mixed.values, poisson.values)


def test_mixed_noise_variances_add(rng):
    noisy = add_mixed(MID_GRAY, 30.0, 3.0, rng).values
    expected = NoiseSpec(kind="mixed", lam=30, sigma=3).variance()
    assert expected == pytest.approx(0.5 / 30 + (3 / 256) ** 2)
    assert noisy.mean() == pytest.approx(0.5, abs=2e-3)
    assert noisy.var() == pytest.approx(expected, rel=0.03)


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda rng: add_poisson(MID_GRAY, 30.0, rng),
        lambda rng: add_salt_pepper(MID_GRAY, 0.3, rng),
        lambda rng: add_mixed(MID_GRAY, 30.0, 3.0, rng),
    ],
    ids=["poisson", "saltpepper", "mixed"],
)
def test_noise_is_independent_between_neighbours(rng, corrupt):
    residual = corrupt(rng).values - 0.5
    horizontal = np.corrcoef(residual[:, :-1].reshape(-1), residual[:, 1:].reshape(-1))[0, 1]
    vertical = np.corrcoef(residual[:-1].reshape(-1), residual[1:].reshape(-1))[0, 1]
    assert abs(horizontal) < 0.01 and abs(vertical) < 0.01

@pytest.mark.parametrize(
    "call",
    [
        lambda rng: add_gaussian(MID_GRAY, -1.0, rng),
        lambda rng: add_poisson(MID_GRAY, 0.0, rng),
        lambda rng: add_salt_pepper(MID_GRAY, 1.5, rng),
    ],
)
def test_invalid_noise_parameters_are_rejected(rng, call):
    with pytest.raises(ConfigurationError):
        call(rng)


@pytest.mark.parametrize("kind", ["gaussian", "poisson", "saltpepper", "mixed"])
def test_noise_is_a_pure_function_of_its_substream(gray_image, kind):
    service = NoiseService(NoiseSpec(kind=kind))
    first = service.apply_quantized(gray_image, derive_rng(5, "noise", 2))
    second = service.apply_quantized(gray_image, derive_rng(5, "noise", 2))
    other = service.apply_quantized(gray_image, derive_rng(5, "noise", 3))
    assert first.is_eight_bit
    assert np.array_equal(first.values, second.values)
    assert not np.array_equal(first.values, other.values)


def test_noise_spec_describes_itself():
    assert NoiseSpec(kind="gaussian", sigma=25).describe() == "gaussian(sigma=25)"
    assert NoiseSpec(kind="mixed", **{"lambda": 30, "sigma": 3}).describe() == "mixed(lambda=30, sigma=3)"
    assert NoiseSpec(kind="poisson", lam=30).variance() == pytest.approx(1 / 60)
