import numpy as np
import pytest

from app.core.errors import ConfigurationError, ShapeError
from app.core.rng import derive_rng
from app.db.pgm import load_pgm
from app.models.networks import ConsistencyBank, RefinerNet
from app.schemas.audit import AuditConfig, ConsistencyReport, ImageResidual
from app.schemas.aux import AuxSample
from app.schemas.image import Image
from app.schemas.network import ConsistencyConfig
from app.services.audit_service import (
    audit_pool, compare_reports, dirac_outputs, export_residuals, fit_g_for_denoiser, format_report, load_report,
    refiner_outputs, region_energies, residual_map, save_report,
)
from app.services.aux_service import AuxEntry, AuxPool
from app.services.oracle_service import gaussian_toy_coefficient

TINY_G = ConsistencyConfig(layers=2, width=4)


def with_estimates(pool: AuxPool, build) -> AuxPool:
    return AuxPool([
        AuxEntry(entry.stem, entry.sample, entry.denoised, build(entry)) for entry in pool.entries
    ])


def report(denoiser_id: str, totals: dict[str, float], config_hash: str = "cfg") -> ConsistencyReport:
    rows = [ImageResidual(stem=stem, energies=[total]) for stem, total in totals.items()]
    return ConsistencyReport(denoiser_id=denoiser_id, config_hash=config_hash, orders=[1], rows=rows)


def test_zero_estimates_give_zero_residual_for_an_untrained_bank(tiny_pool):
    pool = with_estimates(tiny_pool, lambda entry: np.zeros((2,) + entry.denoised.shape))
    bank = ConsistencyBank([1, 2], TINY_G.layers, TINY_G.width, seed=0)
    maps, energies = residual_map(pool.entries[0], bank)
    assert maps.shape == (2, 16, 16)
    assert energies == [0.0, 0.0]


def test_residual_is_the_estimate_minus_the_consistency_output(float64, tiny_pool, affine_consistency):
    bank = ConsistencyBank([1, 2], TINY_G.layers, TINY_G.width, seed=0)
    affine_consistency(bank, 0.5)
    entry = tiny_pool.entries[0]
    maps, energies = residual_map(entry, bank)
    g = 0.5 * (entry.sample.yhat.values - entry.denoised)
    np.testing.assert_allclose(maps[0], entry.estimate[0] - g, rtol=1e-12, atol=1e-14)
    assert energies[1] == pytest.approx(np.mean((entry.estimate[1] - g) ** 2), rel=1e-12)


@pytest.mark.slow
def test_fit_recovers_a_planted_affine_relation(float64, tiny_pool):
    pool = with_estimates(tiny_pool, lambda entry: 0.1 * (entry.sample.yhat.values - entry.denoised)[None])
    cfg = AuditConfig(steps=1500, batch=4, crop=8, lr_schedule="0:1e-2, 60%:1e-3, 85%:1e-4")
    bank, fit_loss = fit_g_for_denoiser(pool, [1], TINY_G, cfg, seed=0, progress=False)
    audited = audit_pool(pool, bank, "linear5", "cfg", fit_loss=fit_loss)
    target_energy = np.mean([np.mean(entry.estimate ** 2) for entry in pool.entries])
    assert audited.aggregate < 1e-2 * target_energy
    assert audited.heads == 1 and audited.fit_loss == fit_loss


def gaussian_toy_pool(count: int, size: int, sigma_n: float, sigma_z: float) -> AuxPool:
    """Flat gray scenes whose denoiser returns the posterior mean 0.5; the estimate is z itself."""
    entries = []
    for index in range(count):
        rng = derive_rng(11, "toy", index)
        y = 0.5 + rng.normal(0.0, sigma_n, size=(size, size))
        z = rng.normal(0.0, sigma_z, size=(size, size))
        sample = AuxSample(y=Image(values=y), z=z, yhat=Image(values=y + z), mask=np.ones((size, size)))
        entries.append(AuxEntry(f"toy{index:02d}", sample, np.full((size, size), 0.5), z[None]))
    return AuxPool(entries)


@pytest.mark.slow
def test_fit_recovers_the_gaussian_toy_coefficient(float64):
    sigma_n, sigma_z = 6 / 256, 2 / 256
    pool = gaussian_toy_pool(8, 32, sigma_n, sigma_z)
    cfg = AuditConfig(steps=1500, batch=8, crop=16, lr_schedule="0:1e-2, 50%:1e-3, 80%:1e-4")
    bank, _ = fit_g_for_denoiser(pool, [1], TINY_G, cfg, seed=0, progress=False)

    offsets, fitted = [], []
    for entry in pool.entries:
        maps, _ = residual_map(entry, bank)
        offsets.append(entry.sample.yhat.values - entry.denoised)
        fitted.append(entry.estimate[0] - maps[0])
    slope = np.polyfit(np.concatenate(offsets).ravel(), np.concatenate(fitted).ravel(), 1)[0]
    assert gaussian_toy_coefficient(6.0, 2.0) == pytest.approx(0.1)
    assert slope == pytest.approx(0.1, abs=0.02)


def test_fit_checks_orders_against_the_pool(tiny_pool):
    with pytest.raises(ShapeError):
        fit_g_for_denoiser(tiny_pool, [1], TINY_G, AuditConfig(steps=1, batch=2, crop=8), seed=0, progress=False)


def test_short_fit_returns_a_finite_loss(tiny_pool):
    bank, fit_loss = fit_g_for_denoiser(
        tiny_pool, [1, 2], TINY_G, AuditConfig(steps=3, batch=2, crop=8), seed=0, progress=False,
    )
    assert bank.orders == [1, 2]
    assert np.isfinite(fit_loss) and fit_loss >= 0


def test_refiner_outputs_carry_one_channel_per_head(tiny_pool):
    refiner = RefinerNet(depth=2, width=4, heads=3, seed=0)
    bank = ConsistencyBank([1, 2], TINY_G.layers, TINY_G.width, seed=0)
    audited = audit_pool(tiny_pool, bank, "refined", "cfg", outputs=refiner_outputs(refiner))
    assert audited.heads == 3
    assert [row.stem for row in audited.rows] == [entry.stem for entry in tiny_pool.entries]
    assert dirac_outputs(None, np.ones((1, 1, 2, 2))).shape == (1, 1, 2, 2)


def test_identical_reports_tie_everywhere():
    a = report("linear5", {"img0": 0.2, "img1": 0.4})
    comparison = compare_reports(a, a.model_copy(update={"denoiser_id": "refined"}))
    assert (comparison.a_wins, comparison.b_wins, comparison.ties) == (0, 0, 2)
    assert comparison.energy_ratio == 1.0


def test_halved_energies_win_every_image():
    a = report("linear5", {"img0": 0.2, "img1": 0.4})
    b = report("refined", {"img0": 0.1, "img1": 0.2})
    comparison = compare_reports(a, b)
    assert comparison.b_wins == 2 and comparison.b_win_fraction == 1.0
    assert comparison.energy_ratio == pytest.approx(0.5)


def test_zero_aggregates_compare_without_dividing_by_zero():
    zero = report("linear5", {"img0": 0.0})
    assert compare_reports(zero, zero).energy_ratio == 1.0
    assert compare_reports(zero, report("refined", {"img0": 0.1})).energy_ratio == float("inf")


def test_reports_from_different_runs_are_not_compared():
    with pytest.raises(ConfigurationError):
        compare_reports(report("a", {"img0": 0.1}), report("b", {"img0": 0.1}, config_hash="other"))
    with pytest.raises(ConfigurationError):
        compare_reports(report("a", {"img0": 0.1}), report("b", {"img1": 0.1}))


def test_report_files_round_trip_and_format(tmp_path):
    original = report("median3", {"img0": 0.25, "img1": 0.75})
    loaded = load_report(save_report(tmp_path / "audit" / "report.json", original))
    assert loaded == original
    text = format_report(loaded)
    assert "median3" in text and "aggregate" in text and "5.0000e-01" in text


def test_residual_maps_are_exported_as_images(tmp_path):
    maps = np.stack([np.linspace(-1, 1, 64).reshape(8, 8), np.zeros((8, 8))])
    paths = export_residuals(tmp_path, "img0_a0", maps, [1, 3])
    assert [p.name for p in paths] == ["img0_a0.residual1.pgm", "img0_a0.residual3.pgm"]
    assert np.all(load_pgm(paths[1]).values == load_pgm(paths[1]).values[0, 0])


def test_region_energies_separate_edges_from_flat_areas(rng):
    guide = rng.normal(scale=1e-3, size=(16, 16))
    guide[:, 8:] = 1.0
    residual = np.zeros((16, 16))
    residual[:, 7:9] = 1.0
    edge, flat = region_energies(residual, guide)
    assert edge > 0.0
    assert flat == 0.0
