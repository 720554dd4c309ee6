from typing import Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class ScheduleSegment(BaseModel):
    start: int = Field(..., ge=0, description="First step at which the value applies")
    value: float = Field(..., ge=0)


class TrainConfig(BaseModel):
    lam: float = Field(1.0, ge=0, alias="lambda", description="Penalty coefficient of the consistency term")
    heads: int = Field(64, ge=1, description="Number of refiner outputs K")
    orders: list[int] = Field(default_factory=lambda: [1, 2, 3], description="Powers l of f_l(z) = t_l z^l")
    batch: int = Field(16, ge=1)
    crop: int = Field(32, ge=4)
    steps: int = Field(20000, ge=1)
    lr_schedule: str = Field("0:1e-3, 60%:1e-4, 85%:5e-5", description="Piecewise-constant learning rate")
    gamma_schedule: str = Field("ramp:0:1.5:50%", description="Piecewise-constant rescaling weight")
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    reduce_heads: bool = Field(True, description="Sum the consistency gradient over heads before rescaling")
    samples_per_image: int = Field(4, ge=1, description="Auxiliary realizations kept per training image")
    holdout_fraction: float = Field(0.1, ge=0, lt=1)
    log_every: int = Field(100, ge=1)
    checkpoint_every: int = Field(2000, ge=1)

    # Estimator and calibration
    estimator_steps: int = Field(6000, ge=1)
    estimator_batch: int = Field(16, ge=1)
    estimator_lr_schedule: str = "0:1e-3, 70%:1e-4"
    pilot_steps: int = Field(1000, ge=1)
    calibration_samples: int = Field(32, ge=1)
    t: Optional[list[float]] = Field(None, description="Calibrated scaling constants, one per order")

    model_config = {"populate_by_name": True}

    @field_validator("orders")
    @classmethod
    def _orders_in_range(cls, orders: list[int]) -> list[int]:
        if not orders or any(order not in (1, 2, 3) for order in orders):
            raise ValueError(f"orders must be a non-empty subset of 1, 2, 3, got {orders}")
        return orders

    @model_validator(mode="after")
    def _t_matches_orders(self):
        if self.t is not None:
            if len(self.t) != len(self.orders) or any(value <= 0 for value in self.t):
                raise ValueError("t must hold one positive constant per order")
        return self

    @property
    def num_orders(self) -> int:
        return len(self.orders)


class LossBreakdown(BaseModel):
    step: int
    lr: float
    gamma: float
    l1: float = Field(..., ge=0)
    l2: float = Field(..., ge=0)
    l2_per_order: list[float] = Field(default_factory=list)


class EstimatorRecord(BaseModel):
    step: int
    lr: float
    train_loss: float
    heldout_loss: Optional[float] = None
