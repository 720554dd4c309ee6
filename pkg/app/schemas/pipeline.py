from typing import Optional

from pydantic import BaseModel, Field

from app.schemas.audit import ReportComparison
from app.schemas.metrics import MetricSummary


class PipelineSummary(BaseModel):
    denoiser_id: str
    noisy: MetricSummary
    base: MetricSummary
    refined: MetricSummary
    comparison: Optional[ReportComparison] = None
    yhat_gap_db: Optional[float] = Field(None, description="Mean PSNR of inference on y minus inference on yhat")

    @property
    def delta_db(self) -> float:
        return self.refined.mean_psnr - self.base.mean_psnr


class SweepRow(BaseModel):
    setting: dict[str, float | int | str]
    seed: int
    psnr: Optional[float] = None
    heldout_l2: Optional[float] = None


class SweepResult(BaseModel):
    rows: list[SweepRow] = Field(default_factory=list)

    def mean_by_setting(self, field: str) -> dict[str, float]:
        grouped: dict[str, list[float]] = {}
        for row in self.rows:
            value = getattr(row, field)
            if value is not None:
                key = ", ".join(f"{k}={v}" for k, v in sorted(row.setting.items()))
                grouped.setdefault(key, []).append(value)
        return {key: sum(values) / len(values) for key, values in grouped.items()}
