from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator


class DenoiserSpec(BaseModel):
    kind: Literal["linear", "median", "imf", "external"] = "linear"
    window: int = Field(3, ge=3, description="Median window")
    linear_window: int = Field(5, ge=3)
    max_iters: int = Field(10, ge=1, description="Iteration cap of the iterative mean filter")
    external_dir: Optional[Path] = Field(None, description="Directory holding precomputed outputs")
    pattern: str = "{stem}.denoised.pgm"

    model_config = {"extra": "forbid"}

    @field_validator("window", "linear_window")
    @classmethod
    def _odd(cls, window: int) -> int:
        if window % 2 == 0:
            raise ValueError(f"window must be odd, got {window}")
        return window

    @property
    def identifier(self) -> str:
        if self.kind == "median":
            return f"median{self.window}"
        if self.kind == "linear":
            return f"linear{self.linear_window}"
        if self.kind == "imf":
            return f"imf{self.max_iters}"
        return "external"
