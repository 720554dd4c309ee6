from pydantic import BaseModel, Field


class MetricResult(BaseModel):
    stem: str
    psnr: float
    ssim: float = Field(..., ge=-1, le=1)
    psnr_capped: bool = False


class MetricSummary(BaseModel):
    rows: list[MetricResult] = Field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return sum(row.psnr for row in self.rows) / len(self.rows) if self.rows else 0.0

    @property
    def mean_ssim(self) -> float:
        return sum(row.ssim for row in self.rows) / len(self.rows) if self.rows else 0.0
