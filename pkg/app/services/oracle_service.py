"""Exact enumeration over tiny worlds and closed-form checks of the Gaussian toy case."""
import configparser
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from app.core.config import settings
from app.core.errors import ConfigurationError, MissingArtifactError
from app.core.rng import derive_rng
from app.schemas.oracle import ConditionalTable, DiscreteWorld, GaussianToy, OracleCheck, OracleReport
from app.utils.logger import logger

KEY_DECIMALS = 9


def _identity(values: np.ndarray) -> np.ndarray:
    return values


@dataclass
class Enumeration:
    """Joint law of every positive-probability configuration, grouped by yhat."""

    x_index: np.ndarray      # [configs, pixels] index into the x alphabet
    z_values: np.ndarray     # [configs, pixels]
    yhat_values: np.ndarray  # [configs, pixels]
    weights: np.ndarray      # [configs]
    yhat_keys: np.ndarray    # [distinct yhat, pixels]
    yhat_group: np.ndarray   # [configs] index into yhat_keys

    @property
    def yhat_probability(self) -> np.ndarray:
        return np.bincount(self.yhat_group, weights=self.weights, minlength=len(self.yhat_keys))


def _conditional(table: ConditionalTable, indices: np.ndarray) -> np.ndarray:
    """Rows of ``table`` selected by the conditioning values in ``indices`` [configs, pixels]."""
    if not table.given:
        return np.broadcast_to(table.probs, (indices.shape[0], table.probs.shape[-1]))
    return table.probs[tuple(indices[:, j] for j in table.given)]


def enumerate_world(world: DiscreteWorld) -> Enumeration:
    n = world.pixels
    x_alphabet = np.asarray(world.x_alphabet)
    noise_alphabet = np.asarray(world.noise_alphabet)
    aux_alphabet = np.asarray(world.aux_alphabet)
    y_alphabet = np.asarray(world.y_alphabet)

    x_configs = np.array(list(itertools.product(range(len(x_alphabet)), repeat=n)), dtype=np.int64)
    n_configs = np.array(list(itertools.product(range(len(noise_alphabet)), repeat=n)), dtype=np.int64)
    z_configs = np.array(list(itertools.product(range(len(aux_alphabet)), repeat=n)), dtype=np.int64)

    prior = world.prior[tuple(x_configs.T)]
    # p(n | x) for every (x config, n config)
    p_noise = np.ones((len(x_configs), len(n_configs)))
    for i, table in enumerate(world.noise_tables):
        rows = _conditional(table, x_configs)
        p_noise *= rows[:, n_configs[:, i]]

    xn_x = np.repeat(np.arange(len(x_configs)), len(n_configs))
    xn_n = np.tile(np.arange(len(n_configs)), len(x_configs))
    xn_weight = prior[xn_x] * p_noise.reshape(-1)
    keep = xn_weight > 0
    xn_x, xn_n, xn_weight = xn_x[keep], xn_n[keep], xn_weight[keep]

    y_values = np.round(x_alphabet[x_configs[xn_x]] + noise_alphabet[n_configs[xn_n]], 12)
    y_index = np.searchsorted(y_alphabet, y_values)

    p_aux = np.ones((len(xn_x), len(z_configs)))
    for i, table in enumerate(world.aux_tables):
        rows = _conditional(table, y_index)
        p_aux *= rows[:, z_configs[:, i]]

    weights = xn_weight[:, None] * p_aux
    pair, z_choice = np.nonzero(weights > 0)
    z_values = aux_alphabet[z_configs[z_choice]]
    yhat_values = y_values[pair] + z_values
    yhat_keys, yhat_group = np.unique(np.round(yhat_values, KEY_DECIMALS), axis=0, return_inverse=True)
    return Enumeration(
        x_index=x_configs[xn_x[pair]],
        z_values=z_values,
        yhat_values=yhat_values,
        weights=weights[pair, z_choice],
        yhat_keys=yhat_keys,
        yhat_group=yhat_group.reshape(-1),
    )


def _group_of(enumeration: Enumeration, yhat) -> int:
    key = np.round(np.asarray(yhat, dtype=np.float64), KEY_DECIMALS)
    matches = np.flatnonzero(np.all(enumeration.yhat_keys == key, axis=1))
    if matches.size == 0:
        raise ConfigurationError(f"yhat={list(key)} is not attainable in this world")
    return int(matches[0])


def enumerate_posterior(world: DiscreteWorld, yhat, enumeration: Optional[Enumeration] = None) -> np.ndarray:
    """p(x_i = a | yhat) as an array [pixels, |x alphabet|]."""
    enumeration = enumeration or enumerate_world(world)
    group = _group_of(enumeration, yhat)
    selected = enumeration.yhat_group == group
    weights = enumeration.weights[selected]
    posterior = np.zeros((world.pixels, len(world.x_alphabet)))
    for i in range(world.pixels):
        posterior[i] = np.bincount(enumeration.x_index[selected, i], weights=weights, minlength=len(world.x_alphabet))
    return posterior / weights.sum()


def verify_posterior_identity(world: DiscreteWorld, f: Callable[[np.ndarray], np.ndarray] = _identity) -> float:
    """max |E[f(z_i)|yhat] - sum_a p(x_i=a|yhat) G_i(a, yhat_i)| with G_i(a, v) = E[f(z_i) | x_i=a, yhat_i=v]."""
    enumeration = enumerate_world(world)
    groups = len(enumeration.yhat_keys)
    p_yhat = enumeration.yhat_probability
    x_count = len(world.x_alphabet)
    worst = 0.0
    for i in range(world.pixels):
        fz = f(enumeration.z_values[:, i])
        lhs = np.bincount(enumeration.yhat_group, weights=enumeration.weights * fz, minlength=groups) / p_yhat

        # G_i over (x_i, yhat_i)
        local_keys, local_group = np.unique(np.round(enumeration.yhat_values[:, i], KEY_DECIMALS), return_inverse=True)
        local_group = local_group.reshape(-1)
        cell = enumeration.x_index[:, i] * len(local_keys) + local_group
        cell_mass = np.bincount(cell, weights=enumeration.weights, minlength=x_count * len(local_keys))
        cell_f = np.bincount(cell, weights=enumeration.weights * fz, minlength=x_count * len(local_keys))
        g_table = np.divide(cell_f, cell_mass, out=np.zeros_like(cell_f), where=cell_mass > 0)

        # sum_a p(x_i = a, yhat) G_i(a, yhat_i), divided by p(yhat)
        rhs = np.bincount(enumeration.yhat_group, weights=enumeration.weights * g_table[cell], minlength=groups) / p_yhat
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def sample_world(world: DiscreteWorld, count: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Monte Carlo draws of (x, n, z, yhat), each [count, pixels]."""

    def draw(probabilities: np.ndarray) -> np.ndarray:
        cumulative = np.cumsum(probabilities, axis=-1)
        u = rng.random((probabilities.shape[0], 1)) * cumulative[:, -1:]
        return np.minimum((u >= cumulative).sum(axis=-1), probabilities.shape[-1] - 1)

    x_count = len(world.x_alphabet)
    flat = rng.choice(world.prior.size, size=count, p=world.prior.reshape(-1) / world.prior.sum())
    x_index = np.stack(np.unravel_index(flat, (x_count,) * world.pixels), axis=1)
    n_index = np.stack([draw(_conditional(t, x_index)) for t in world.noise_tables], axis=1)
    y = np.round(np.asarray(world.x_alphabet)[x_index] + np.asarray(world.noise_alphabet)[n_index], 12)
    y_index = np.searchsorted(np.asarray(world.y_alphabet), y)
    z_index = np.stack([draw(_conditional(t, y_index)) for t in world.aux_tables], axis=1)
    z = np.asarray(world.aux_alphabet)[z_index]
    return {"x_index": x_index, "x": np.asarray(world.x_alphabet)[x_index], "y": y, "z": z, "yhat": y + z}


def random_world(rng: np.random.Generator, pixels: int = 2, alphabet: int = 3, name: str = "random") -> DiscreteWorld:
    """A valid world: pixel-local noise and auxiliary tables with random entries."""

    def simplex(shape) -> np.ndarray:
        raw = rng.random(shape) + 0.05
        return raw / raw.sum(axis=-1, keepdims=True)

    x_alphabet = sorted(rng.choice(np.arange(0, 8), size=alphabet, replace=False).astype(float) / 8)
    noise_alphabet = sorted(rng.choice(np.arange(-4, 5), size=alphabet, replace=False).astype(float) / 8)
    aux_alphabet = sorted(rng.choice(np.arange(-2, 3), size=min(alphabet, 5), replace=False).astype(float) / 16)
    y_count = len({round(a + b, 12) for a in x_alphabet for b in noise_alphabet})
    return DiscreteWorld(
        name=name,
        pixels=pixels,
        x_alphabet=x_alphabet,
        prior=simplex(alphabet ** pixels).reshape((alphabet,) * pixels),
        noise_alphabet=noise_alphabet,
        noise_tables=[ConditionalTable(given=[i], probs=simplex((alphabet, alphabet))) for i in range(pixels)],
        aux_alphabet=aux_alphabet,
        aux_tables=[ConditionalTable(given=[i], probs=simplex((y_count, len(aux_alphabet)))) for i in range(pixels)],
    )


def violating_world(kind: str) -> DiscreteWorld:
    """Two-pixel counterexamples.

    ``noise``: n_0 copies x_1, so the noise at pixel 0 is not local.
    ``aux``: z_0 copies y_1, so the auxiliary value at pixel 0 is not local.
    """
    dirac0, dirac1 = [1.0, 0.0], [0.0, 1.0]
    if kind == "noise":
        return DiscreteWorld(
            name="noise-violation",
            pixels=2,
            x_alphabet=[0.0, 1.0],
            prior=[[0.25, 0.25], [0.25, 0.25]],
            noise_alphabet=[0.0, 1.0],
            noise_tables=[
                ConditionalTable(given=[0, 1], probs=[[dirac0, dirac1], [dirac0, dirac1]]),
                ConditionalTable(given=[1], probs=[dirac0, dirac0]),
            ],
            aux_alphabet=[0.0, 1.0],
            aux_tables=[ConditionalTable(given=[i], probs=[[0.5, 0.5]] * 3) for i in range(2)],
        )
    if kind == "aux":
        return DiscreteWorld(
            name="aux-violation",
            pixels=2,
            x_alphabet=[0.0, 1.0],
            prior=[[0.5, 0.5], [0.0, 0.0]],
            noise_alphabet=[0.0, 1.0],
            noise_tables=[
                ConditionalTable(given=[0], probs=[[0.5, 0.5], [0.5, 0.5]]),
                ConditionalTable(given=[1], probs=[dirac0, dirac0]),
            ],
            aux_alphabet=[0.0, 1.0],
            aux_tables=[
                ConditionalTable(given=[0, 1], probs=[[dirac0, dirac1, dirac1]] * 3),
                ConditionalTable(given=[1], probs=[dirac0] * 3),
            ],
        )
    raise ConfigurationError(f"Unknown violation kind {kind!r}, expected 'noise' or 'aux'")


def gaussian_toy_coefficient(sigma_n: float, sigma_z: float) -> float:
    """c in E[z_i | x_i, yhat_i] = c (yhat_i - x_i) for Gaussian noise and auxiliary signal."""
    toy = GaussianToy(sigma_n=sigma_n, sigma_z=sigma_z)
    return toy.sigma_z ** 2 / (toy.sigma_z ** 2 + toy.sigma_n ** 2)


def sample_gaussian_toy(sigma_n: float, sigma_z: float, count: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    x = rng.uniform(0.0, 255.0, size=count)
    n = rng.normal(0.0, sigma_n, size=count)
    z = rng.normal(0.0, sigma_z, size=count)
    return {"x": x, "n": n, "z": z, "yhat": x + n + z}


def gaussian_toy_slope(sigma_n: float, sigma_z: float, count: int, rng: np.random.Generator) -> float:
    """Least-squares slope of z on (yhat - x); estimates the toy coefficient."""
    draws = sample_gaussian_toy(sigma_n, sigma_z, count, rng)
    residual = draws["yhat"] - draws["x"]
    return float(np.dot(draws["z"], residual) / np.dot(residual, residual))


def load_worlds(path) -> list[DiscreteWorld]:
    """Worlds from an INI file; each section is one world, table values are JSON."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"World fixtures not found: {path}", path=path)
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    worlds = []
    for section in parser.sections():
        body = parser[section]
        try:
            worlds.append(
                DiscreteWorld(
                    name=section,
                    pixels=body.getint("pixels"),
                    x_alphabet=json.loads(body["x_alphabet"]),
                    prior=json.loads(body["prior"]),
                    noise_alphabet=json.loads(body["noise_alphabet"]),
                    noise_tables=[ConditionalTable(**t) for t in json.loads(body["noise_tables"])],
                    aux_alphabet=json.loads(body["aux_alphabet"]),
                    aux_tables=[ConditionalTable(**t) for t in json.loads(body["aux_tables"])],
                )
            )
        except (KeyError, ValueError) as e:
            raise ConfigurationError(f"Invalid world [{section}] in {path}: {e}")
    return worlds


IDENTITY_TOLERANCE = 1e-12
VIOLATION_THRESHOLD = 1e-3


def check_world(world: DiscreteWorld) -> OracleCheck:
    """Valid worlds must reproduce the identity; violating worlds must break it visibly."""
    residual = verify_posterior_identity(world)
    valid = world.satisfies_noise_assumption and world.satisfies_aux_assumption
    passed = residual < IDENTITY_TOLERANCE if valid else residual > VIOLATION_THRESHOLD
    return OracleCheck(name=world.name, residual=residual, valid=valid, passed=passed)


def run_oracle_suite(
    seed: int,
    fixtures: Sequence[DiscreteWorld] = (),
    random_count: int = 100,
    toy: GaussianToy = GaussianToy(),
    toy_samples: int = 1_000_000,
    toy_tolerance: float = 0.003,
) -> OracleReport:
    worlds = list(fixtures)
    for i in range(random_count):
        rng = derive_rng(seed, "oracle-world", i)
        worlds.append(random_world(rng, pixels=int(rng.integers(1, 4)), alphabet=int(rng.integers(2, 4)), name=f"random-{i}"))
    worlds += [violating_world("noise"), violating_world("aux")]

    with ThreadPoolExecutor(max_workers=settings.workers) as pool:
        checks = list(pool.map(check_world, worlds))
    for check in checks:
        if not check.passed:
            logger.warning(f"Oracle check failed for {check.name}: residual {check.residual:.3e}")

    report = OracleReport(
        checks=checks,
        toy_coefficient=gaussian_toy_coefficient(toy.sigma_n, toy.sigma_z),
        toy_slope=gaussian_toy_slope(toy.sigma_n, toy.sigma_z, toy_samples, derive_rng(seed, "oracle-toy")),
        toy_tolerance=toy_tolerance,
    )
    logger.info(f"Oracle suite: {sum(c.passed for c in checks)}/{len(checks)} worlds passed, toy slope {report.toy_slope:.4f}")
    return report


def format_oracle_report(report: OracleReport) -> str:
    valid = [c.residual for c in report.checks if c.valid]
    lines = [f"{'world':<24} {'valid':>6} {'residual':>12} {'ok':>4}"]
    for check in report.checks:
        if check.name.startswith("random-"):
            continue
        lines.append(f"{check.name:<24} {str(check.valid):>6} {check.residual:>12.3e} {'yes' if check.passed else 'NO':>4}")
    random_checks = [c for c in report.checks if c.name.startswith("random-")]
    if random_checks:
        worst = max(c.residual for c in random_checks)
        lines.append(f"{f'{len(random_checks)} random worlds':<24} {'True':>6} {worst:>12.3e} "
                     f"{'yes' if all(c.passed for c in random_checks) else 'NO':>4}")
    if valid:
        lines.append(f"max residual over valid worlds: {max(valid):.3e}")
    lines.append(f"gaussian toy: coefficient {report.toy_coefficient:.6f}, sampled slope {report.toy_slope:.6f}")
    return "\n".join(lines)
