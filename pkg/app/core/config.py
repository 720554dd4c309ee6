from pathlib import Path
from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


PROJECT_ROOT = Path(__file__).resolve().parents[2]


class Settings(BaseSettings):
    # Logging
    log_config: Path = PROJECT_ROOT / "logging.conf"
    log_dir: Path = PROJECT_ROOT / "logs"
    log_level: str = "INFO"

    # Numerics
    precision: Literal["float32", "float64"] = "float32"
    check_finite: bool = True

    # Parallelism
    workers: int = Field(4, ge=1)
    prefetch_depth: int = Field(4, ge=1)

    # Cache of base denoiser outputs and estimator maps
    cache_max_items: int = Field(4096, ge=1)

    model_config = SettingsConfigDict(env_file=".env", env_prefix="REFINE_", extra="ignore")


settings = Settings()
