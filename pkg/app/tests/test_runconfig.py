from pathlib import Path

import pytest

from app.core.config import PROJECT_ROOT
from app.core.errors import ConfigurationError, MissingArtifactError
from app.core.runconfig import load_run_config, override_config, parse_override, parse_value

CONFIGS = PROJECT_ROOT / "configs"


def write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def test_values_parse_as_json_or_stay_text():
    assert parse_value(" 25 ") == 25
    assert parse_value("[1, 2, 3]") == [1, 2, 3]
    assert parse_value("true") is True
    assert parse_value("0:1e-3, 60%:1e-4") == "0:1e-3, 60%:1e-4"
    assert parse_override("training.lambda=0.5") == ("training", "lambda", 0.5)


@pytest.mark.parametrize("text", ["training.steps", "steps=3", ".steps=3", "training.=3"])
def test_malformed_overrides_are_rejected(text):
    with pytest.raises(ConfigurationError):
        parse_override(text)


def test_defaults_apply_without_a_file():
    config = load_run_config()
    assert config.noise.kind == "gaussian" and config.noise.sigma == 25.0
    assert config.training.orders == [1, 2, 3]
    assert config.paths.resolve("noisy") == Path("runs/desk/noisy")


def test_overrides_win_over_the_file_which_wins_over_defaults(tmp_path):
    path = write(tmp_path / "run.ini", "[training]\nsteps = 10\nheads = 8\n")
    config = load_run_config(path, ["training.steps=20"], work_dir=tmp_path / "out")
    assert config.training.steps == 20
    assert config.training.heads == 8
    assert config.training.batch == 16
    assert config.paths.work_dir == tmp_path / "out"


def test_schedules_and_lambda_alias_are_read_from_the_file(tmp_path):
    path = write(tmp_path / "run.ini", "[training]\nlambda = 0.25\nlr_schedule = 0:1e-2, 50%:1e-3\n")
    config = load_run_config(path)
    assert config.training.lam == 0.25
    assert config.training.lr_schedule == "0:1e-2, 50%:1e-3"


def test_hash_ignores_key_order_but_not_values(tmp_path):
    first = write(tmp_path / "a.ini", "[training]\nsteps = 10\nheads = 8\n[noise]\nsigma = 15\n")
    second = write(tmp_path / "b.ini", "[noise]\nsigma = 15\n[training]\nheads = 8\nsteps = 10\n")
    a, b = load_run_config(first), load_run_config(second)
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != load_run_config(first, ["training.steps=11"]).content_hash()


@pytest.mark.parametrize(
    "text",
    [
        "[training]\nstepz = 10\n",
        "[training]\nsteps = 0\n",
        "[training]\norders = [4]\n",
        "[unknown]\nx = 1\n",
        "[aux]\ndensity = 1.0\nr_std = 0.5\n",
        "[training]\nt = [1.0]\n",
    ],
)
def test_invalid_configurations_are_configuration_errors(tmp_path, text):
    with pytest.raises(ConfigurationError):
        load_run_config(write(tmp_path / "bad.ini", text))


def test_missing_config_file_is_reported(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_run_config(tmp_path / "absent.ini")


@pytest.mark.parametrize("name", ["desk.ini", "saltpepper.ini", "poisson.ini", "mixed.ini", "full.ini"])
def test_shipped_configurations_load(name):
    config = load_run_config(CONFIGS / name)
    assert config.paths.work_dir.name == name[: -len(".ini")]


def test_shipped_configurations_pick_their_denoisers():
    assert load_run_config(CONFIGS / "saltpepper.ini").denoiser.identifier == "median3"
    assert load_run_config(CONFIGS / "desk.ini").denoiser.identifier == "linear5"
    assert load_run_config(CONFIGS / "mixed.ini").noise.describe() == "mixed(lambda=30, sigma=3)"


def test_override_config_revalidates(tiny_config):
    changed = override_config(tiny_config, {"training.lambda": 0.0, "data.count": 4})
    assert changed.training.lam == 0.0 and changed.data.count == 4
    assert tiny_config.training.lam == 1.0
    with pytest.raises(ConfigurationError):
        override_config(tiny_config, {"nosuch.key": 1})
    with pytest.raises(ConfigurationError):
        override_config(tiny_config, {"training.heads": 0})
