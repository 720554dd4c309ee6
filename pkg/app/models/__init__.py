from app.models.networks import (
    ConsistencyBank,
    ConsistencyNet,
    EstimatorNet,
    RefinerNet,
    parameter_audit,
)
