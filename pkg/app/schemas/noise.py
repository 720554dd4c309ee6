from typing import Literal

from pydantic import BaseModel, Field


class NoiseSpec(BaseModel):
    kind: Literal["gaussian", "poisson", "saltpepper", "mixed"] = "gaussian"
    sigma: float = Field(25.0, ge=0, description="Gaussian std relative to 256 intensity levels")
    lam: float = Field(30.0, gt=0, alias="lambda", description="Poisson photon count per unit intensity")
    p: float = Field(0.3, ge=0, le=1, description="Fraction of corrupted pixels for salt-and-pepper")

    model_config = {"populate_by_name": True, "extra": "forbid"}

    def variance(self) -> float:
        """Per-pixel noise variance on a mid-gray image, in [0, 1] units."""
        if self.kind == "gaussian":
            return (self.sigma / 256.0) ** 2
        if self.kind == "poisson":
            return 0.5 / self.lam
        if self.kind == "mixed":
            return 0.5 / self.lam + (self.sigma / 256.0) ** 2
        return self.p * 0.25

    def describe(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian(sigma={self.sigma:g})"
        if self.kind == "poisson":
            return f"poisson(lambda={self.lam:g})"
        if self.kind == "mixed":
            return f"mixed(lambda={self.lam:g}, sigma={self.sigma:g})"
        return f"saltpepper(p={self.p:g})"
