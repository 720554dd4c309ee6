from typing import Optional

from pydantic import BaseModel, Field


class AuditConfig(BaseModel):
    steps: int = Field(3000, ge=1)
    batch: int = Field(8, ge=1)
    crop: int = Field(32, ge=4)
    lr_schedule: str = "0:1e-3, 50%:1e-4, 75%:1e-5, 90%:1e-6"
    export_maps: bool = False

    model_config = {"extra": "forbid"}


class ImageResidual(BaseModel):
    stem: str
    energies: list[float] = Field(..., description="Mean squared residual per order")

    @property
    def total(self) -> float:
        return float(sum(self.energies))


class ConsistencyReport(BaseModel):
    denoiser_id: str
    config_hash: str
    orders: list[int]
    heads: int = 1
    fit_loss: Optional[float] = None
    rows: list[ImageResidual] = Field(default_factory=list)

    @property
    def aggregate(self) -> float:
        if not self.rows:
            return 0.0
        return float(sum(row.total for row in self.rows) / len(self.rows))

    def by_stem(self) -> dict[str, ImageResidual]:
        return {row.stem: row for row in self.rows}


class ReportComparison(BaseModel):
    a_id: str
    b_id: str
    a_wins: int
    b_wins: int
    ties: int
    energy_ratio: float = Field(..., description="Aggregate energy of b over aggregate energy of a")

    @property
    def b_win_fraction(self) -> float:
        total = self.a_wins + self.b_wins + self.ties
        return self.b_wins / total if total else 0.0
