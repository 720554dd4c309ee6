import numpy as np
import pytest
from click.testing import CliRunner

from app.core.autodiff import precision
from app.core.rng import derive_rng
from app.core.runconfig import load_run_config
from app.schemas.aux import AuxConfig
from app.schemas.image import Image
from app.schemas.network import NetworksConfig
from app.schemas.training import TrainConfig
from app.services.aux_service import AuxEntry, AuxPool, aux_stem, make_aux, targets
from app.services.dataset_service import gen_synthetic_dataset
from app.services.denoiser_service import linear_filter

TINY_OVERRIDES = (
    "data.count=6",
    "data.size=16",
    "networks.refiner_depth=2",
    "networks.refiner_width=4",
    "networks.consistency_layers=2",
    "networks.consistency_width=4",
    "networks.estimator_depth=2",
    "networks.estimator_width=4",
    "training.heads=2",
    "training.batch=2",
    "training.crop=8",
    "training.steps=3",
    "training.estimator_steps=3",
    "training.estimator_batch=2",
    "training.pilot_steps=2",
    "training.samples_per_image=2",
    "training.holdout_fraction=0.34",
    "training.log_every=1",
    "audit.steps=3",
    "audit.batch=2",
    "audit.crop=8",
    "aux.density=0.25",
)


def pytest_addoption(parser):
    parser.addoption("--run-acceptance", action="store_true", default=False, help="run the desk-scale acceptance runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-acceptance"):
        return
    skip = pytest.mark.skip(reason="needs --run-acceptance")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def gray_image():
    return Image.quantized(np.full((16, 16), 0.5))


@pytest.fixture
def synthetic_images():
    return gen_synthetic_dataset(4, 16, seed=3, workers=1)


@pytest.fixture
def tiny_networks():
    return NetworksConfig(
        refiner_depth=2, refiner_width=4, consistency_layers=3, consistency_width=4, estimator_depth=2, estimator_width=4,
    )


@pytest.fixture
def tiny_training():
    return TrainConfig(
        heads=2, batch=2, crop=8, steps=4, orders=[1, 2], estimator_steps=4, estimator_batch=2, pilot_steps=2,
        log_every=1, checkpoint_every=2, t=[1.0, 1.0],
    )


@pytest.fixture
def tiny_config(tmp_path):
    return load_run_config(None, TINY_OVERRIDES, tmp_path / "run")


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_pool(synthetic_images):
    """Two realizations per image, linear-filter outputs and exact f_l(z) maps for orders 1 and 2."""
    entries = []
    for i, image in enumerate(synthetic_images):
        for j in range(2):
            sample = make_aux(image, AuxConfig(density=0.25), derive_rng(0, "aux", 2 * i + j))
            entries.append(AuxEntry(
                stem=aux_stem(f"img{i:04d}", j),
                sample=sample,
                denoised=linear_filter(sample.yhat).values,
                estimate=targets(sample.z, [1, 2], [1.0, 1.0]),
            ))
    return AuxPool(entries)


@pytest.fixture(scope="session")
def cli_args():
    """Global options for a tiny run rooted in ``work_dir``, followed by the command."""

    def build(work_dir, *command: str) -> list[str]:
        options = ["--seed", "5", "--work-dir", str(work_dir)]
        for item in TINY_OVERRIDES:
            options += ["--set", item]
        return options + list(command)

    return build


@pytest.fixture
def affine_consistency():
    """Sets every net of a consistency bank to G = slope * (yhat - xhat)."""

    def apply(bank, slope: float) -> None:
        for net in bank.nets:
            net.first.weight.data[...] = 0.0
            net.first.bias.data[...] = 0.0
            net.last.weight.data[...] = slope / net.width
            net.last.bias.data[...] = 0.0

    return apply
