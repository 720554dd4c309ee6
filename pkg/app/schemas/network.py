from pydantic import BaseModel, Field


class RefinerConfig(BaseModel):
    depth: int = Field(8, ge=2)
    width: int = Field(48, ge=1)

    model_config = {"extra": "forbid"}


class ConsistencyConfig(BaseModel):
    layers: int = Field(6, ge=2)
    width: int = Field(32, ge=1)

    model_config = {"extra": "forbid"}


class EstimatorConfig(BaseModel):
    depth: int = Field(8, ge=2)
    width: int = Field(48, ge=1)

    model_config = {"extra": "forbid"}


class NetworksConfig(BaseModel):
    refiner_depth: int = Field(8, ge=2)
    refiner_width: int = Field(48, ge=1)
    consistency_layers: int = Field(6, ge=2)
    consistency_width: int = Field(32, ge=1)
    estimator_depth: int = Field(8, ge=2)
    estimator_width: int = Field(48, ge=1)

    model_config = {"extra": "forbid"}

    @property
    def refiner(self) -> RefinerConfig:
        return RefinerConfig(depth=self.refiner_depth, width=self.refiner_width)

    @property
    def consistency(self) -> ConsistencyConfig:
        return ConsistencyConfig(layers=self.consistency_layers, width=self.consistency_width)

    @property
    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(depth=self.estimator_depth, width=self.estimator_width)
