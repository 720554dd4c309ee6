from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.schemas.image import Image


class AuxConfig(BaseModel):
    density: float = Field(1 / 64, gt=0, le=1, description="Expected fraction of nonzero mask entries")
    r_mode: Literal["gaussian", "constant"] = "gaussian"
    r_std: float = Field(0.05, ge=0)
    r_value: float = 1.0
    discr: bool = True

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def _positive_std(self):
        if self.r_mode == "gaussian" and self.r_std <= 0:
            raise ValueError("r_std must be positive in gaussian mode")
        return self

    def second_moment(self) -> float:
        """E[z_i^2] before discretisation."""
        r2 = self.r_std ** 2 if self.r_mode == "gaussian" else self.r_value ** 2
        return self.density * r2

    @classmethod
    def for_noise(cls, kind: str) -> "AuxConfig":
        if kind == "saltpepper":
            return cls(density=1 / 256, r_mode="constant", r_value=1.0)
        return cls()


class AuxSample(BaseModel):
    y: Image
    z: np.ndarray
    yhat: Image
    mask: np.ndarray

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @model_validator(mode="after")
    def _consistent(self):
        if self.z.shape != self.y.shape or self.mask.shape != self.y.shape or self.yhat.shape != self.y.shape:
            raise ValueError("y, z, yhat and mask must share one shape")
        return self
