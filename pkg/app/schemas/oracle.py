import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

MAX_PIXELS = 3
MAX_ALPHABET = 5


class ConditionalTable(BaseModel):
    """p(out_i | values at the ``given`` pixels); the last axis runs over the output alphabet."""

    given: list[int] = Field(default_factory=list)
    probs: np.ndarray

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @field_validator("probs", mode="before")
    @classmethod
    def _as_array(cls, probs) -> np.ndarray:
        return np.asarray(probs, dtype=np.float64)

    @model_validator(mode="after")
    def _normalized(self):
        if self.probs.ndim != len(self.given) + 1:
            raise ValueError(f"Table with {len(self.given)} conditioning pixels needs {len(self.given) + 1} axes")
        if np.any(self.probs < 0):
            raise ValueError("Probabilities must be non-negative")
        if not np.allclose(self.probs.sum(axis=-1), 1.0, atol=1e-12):
            raise ValueError("Every conditional distribution must sum to 1")
        return self


class DiscreteWorld(BaseModel):
    """Exhaustively enumerable joint law of (x, n, z) on a handful of pixels."""

    name: str = "world"
    pixels: int = Field(..., ge=1, le=MAX_PIXELS)
    x_alphabet: list[float] = Field(..., min_length=1, max_length=MAX_ALPHABET)
    prior: np.ndarray
    noise_alphabet: list[float] = Field(..., min_length=1, max_length=MAX_ALPHABET)
    noise_tables: list[ConditionalTable]
    aux_alphabet: list[float] = Field(..., min_length=1, max_length=MAX_ALPHABET)
    aux_tables: list[ConditionalTable]

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @field_validator("prior", mode="before")
    @classmethod
    def _prior_array(cls, prior) -> np.ndarray:
        return np.asarray(prior, dtype=np.float64)

    @model_validator(mode="after")
    def _tables_fit(self):
        x_count = len(self.x_alphabet)
        if self.prior.shape != (x_count,) * self.pixels:
            self.prior = self.prior.reshape((x_count,) * self.pixels)
        if np.any(self.prior < 0) or not np.isclose(self.prior.sum(), 1.0, atol=1e-12):
            raise ValueError("prior must be a probability table over all x configurations")
        if len(self.noise_tables) != self.pixels or len(self.aux_tables) != self.pixels:
            raise ValueError("One noise table and one auxiliary table per pixel are required")
        y_count = len(self.y_alphabet)
        for tables, in_count, out_count, label in (
            (self.noise_tables, x_count, len(self.noise_alphabet), "noise"),
            (self.aux_tables, y_count, len(self.aux_alphabet), "aux"),
        ):
            for i, table in enumerate(tables):
                if any(j < 0 or j >= self.pixels for j in table.given):
                    raise ValueError(f"{label} table {i} conditions on a pixel outside the world")
                expected = (in_count,) * len(table.given) + (out_count,)
                if table.probs.shape != expected:
                    raise ValueError(f"{label} table {i} has shape {table.probs.shape}, expected {expected}")
        return self

    @property
    def y_alphabet(self) -> list[float]:
        sums = {round(a + b, 12) for a in self.x_alphabet for b in self.noise_alphabet}
        return sorted(sums)

    @property
    def satisfies_noise_assumption(self) -> bool:
        return all(table.given == [i] or table.given == [] for i, table in enumerate(self.noise_tables))

    @property
    def satisfies_aux_assumption(self) -> bool:
        return all(table.given == [i] or table.given == [] for i, table in enumerate(self.aux_tables))


class GaussianToy(BaseModel):
    sigma_n: float = Field(6.0, gt=0)
    sigma_z: float = Field(2.0, gt=0)

    @model_validator(mode="after")
    def _aux_weaker_than_noise(self):
        if self.sigma_z >= self.sigma_n:
            raise ValueError("sigma_z must be smaller than sigma_n")
        return self


class OracleCheck(BaseModel):
    name: str
    residual: float
    valid: bool = Field(..., description="Whether the world satisfies both locality assumptions")
    passed: bool


class OracleReport(BaseModel):
    checks: list[OracleCheck] = Field(default_factory=list)
    toy_coefficient: float
    toy_slope: float
    toy_tolerance: float

    @property
    def passed(self) -> bool:
        toy_ok = abs(self.toy_slope - self.toy_coefficient) <= self.toy_tolerance
        return toy_ok and all(check.passed for check in self.checks)
