import hashlib
import json
from pathlib import Path

from pydantic import BaseModel, Field, model_validator

from app.schemas.audit import AuditConfig
from app.schemas.aux import AuxConfig
from app.schemas.denoiser import DenoiserSpec
from app.schemas.network import NetworksConfig
from app.schemas.noise import NoiseSpec
from app.schemas.training import TrainConfig


class PathsConfig(BaseModel):
    work_dir: Path = Path("runs/desk")
    clean_dir: Path | None = None
    noisy_dir: Path | None = None
    aux_dir: Path | None = None
    denoised_dir: Path | None = None
    checkpoint_dir: Path | None = None

    model_config = {"extra": "forbid"}

    def resolve(self, name: str) -> Path:
        explicit = getattr(self, f"{name}_dir")
        return explicit if explicit is not None else self.work_dir / name


class DataConfig(BaseModel):
    count: int = Field(200, ge=1)
    size: int = Field(64, ge=8)

    model_config = {"extra": "forbid"}


class RunConfig(BaseModel):
    data: DataConfig = Field(default_factory=DataConfig)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    aux: AuxConfig = Field(default_factory=AuxConfig)
    denoiser: DenoiserSpec = Field(default_factory=DenoiserSpec)
    networks: NetworksConfig = Field(default_factory=NetworksConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    audit: AuditConfig = Field(default_factory=AuditConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def _aux_small_against_noise(self):
        from app.services.aux_service import check_condition_two

        check_condition_two(self.aux, self.noise)
        return self

    def content_hash(self) -> str:
        """SHA-256 of the canonical JSON form; independent of key order in the source file."""
        canonical = json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
