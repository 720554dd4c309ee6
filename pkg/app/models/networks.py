"""The refiner, the per-pixel consistency nets and the conditional-expectation estimator."""
from typing import Sequence

import numpy as np

from app.core.autodiff import (
    Tensor, broadcast_to, concat, get_default_dtype, no_grad, relu, reshape,
)
from app.core.errors import ConfigurationError, ShapeError
from app.core.rng import derive_rng
from app.models.layers import ChannelAffine, Conv2d, ConvStack, Module, conv_stack_parameter_count


def _as_batch(images, dtype) -> Tensor:
    """[H,W] or [N,H,W] arrays, or [N,1,H,W] tensors, as an [N,1,H,W] tensor."""
    if isinstance(images, Tensor):
        if images.ndim != 4:
            raise ShapeError(f"Expected an [N,C,H,W] tensor, got {images.shape}")
        return images
    array = np.asarray(images, dtype=dtype)
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3:
        raise ShapeError(f"Expected [H,W] or [N,H,W] images, got {array.shape}")
    return Tensor(array[:, None])


class RefinerNet(Module):
    """K-head residual denoiser: each head subtracts its own noise estimate from the input."""

    def __init__(self, depth: int, width: int, heads: int, seed: int, last_init: str = "small"):
        if heads < 1:
            raise ConfigurationError(f"heads must be at least 1, got {heads}")
        self.depth, self.width, self.heads = depth, width, heads
        self.body = ConvStack("refiner", 1, width, heads, depth, 3, derive_rng(seed, "init-refiner"), last_init)

    def children(self):
        yield self.body

    def __call__(self, yhat) -> Tensor:
        x = _as_batch(yhat, get_default_dtype())
        return x - self.body(x)

    def architecture(self) -> dict:
        return {"depth": self.depth, "width": self.width, "heads": self.heads}

    def expected_parameter_count(self) -> int:
        return conv_stack_parameter_count(1, self.width, self.heads, self.depth, 3)


class ConsistencyNet(Module):
    """G(xhat_i, yhat_i) built from 1x1 convolutions only, so pixel i sees nothing but pixel i.

    Hidden blocks are residual, and the raw (yhat - xhat) channel is added to every
    pre-output feature. The output conv starts at zero, so G starts at zero.
    """

    def __init__(self, name: str, layers: int, width: int, seed: int):
        if layers < 2:
            raise ConfigurationError(f"layers must be at least 2, got {layers}")
        rng = derive_rng(seed, f"init-{name}")
        self.name, self.layers, self.width = name, layers, width
        self.first = Conv2d(f"{name}.0", 2, width, 1, rng)
        self.blocks = [
            (Conv2d(f"{name}.{i}", width, width, 1, rng, bias=False), ChannelAffine(f"{name}.{i}.affine", width))
            for i in range(1, layers - 1)
        ]
        self.last = Conv2d(f"{name}.{layers - 1}", width, 1, 1, rng, init="zero")

    def children(self):
        yield self.first
        for conv, affine in self.blocks:
            yield conv
            yield affine
        yield self.last

    def __call__(self, xhat, yhat) -> Tensor:
        """``xhat`` and ``yhat`` are [N,1,H,W] tensors of equal shape."""
        if xhat.shape != yhat.shape:
            raise ShapeError(f"G needs equal input shapes, got {xhat.shape} and {yhat.shape}")
        h = relu(self.first(concat([xhat, yhat], axis=1)))
        for conv, affine in self.blocks:
            h = h + relu(affine(conv(h)))
        return self.last(h + (yhat - xhat))

    def expected_parameter_count(self) -> int:
        return 3 * self.width + (self.layers - 2) * (self.width * self.width + 2 * self.width) + self.width + 1


class ConsistencyBank(Module):
    """One ConsistencyNet per order l."""

    def __init__(self, orders: Sequence[int], layers: int, width: int, seed: int):
        self.orders = list(orders)
        self.nets = [ConsistencyNet(f"g{order}", layers, width, seed) for order in self.orders]

    def children(self):
        return iter(self.nets)

    def head_means(self, heads: Tensor, yhat: Tensor) -> list[Tensor]:
        """(1/K) sum_k G_l(R_k, yhat) for each order, each [N,1,H,W]."""
        n, k, h, w = heads.shape
        flat_heads = reshape(heads, (n * k, 1, h, w))
        flat_yhat = reshape(broadcast_to(yhat, (n, k, h, w)), (n * k, 1, h, w))
        means = []
        for net in self.nets:
            per_head = reshape(net(flat_heads, flat_yhat), (n, k, h, w))
            means.append(per_head.mean(axis=1, keepdims=True))
        return means

    def architecture(self) -> dict:
        first = self.nets[0]
        return {"orders": self.orders, "layers": first.layers, "width": first.width}


class EstimatorNet(Module):
    """Regresses f_l(z) from yhat; one output channel per order."""

    def __init__(self, depth: int, width: int, outputs: int, seed: int):
        self.depth, self.width, self.outputs = depth, width, outputs
        self.body = ConvStack("estimator", 1, width, outputs, depth, 3, derive_rng(seed, "init-estimator"), "small")

    def children(self):
        yield self.body

    def __call__(self, yhat) -> Tensor:
        return self.body(_as_batch(yhat, get_default_dtype()))

    def predict(self, yhat: np.ndarray) -> np.ndarray:
        """Full-image maps [L,H,W] (or [N,L,H,W] for a batch) without building a graph."""
        array = np.asarray(yhat)
        with no_grad():
            out = self(array).data.astype(np.float64)
        return out[0] if array.ndim == 2 else out

    def architecture(self) -> dict:
        return {"depth": self.depth, "width": self.width, "outputs": self.outputs}

    def expected_parameter_count(self) -> int:
        return conv_stack_parameter_count(1, self.width, self.outputs, self.depth, 3)


def parameter_audit(*modules: Module) -> dict[str, tuple[int, int]]:
    """Actual and formula parameter counts per network."""
    report = {}
    for module in modules:
        if isinstance(module, ConsistencyBank):
            for net in module.nets:
                report[net.name] = (net.num_parameters(), net.expected_parameter_count())
        else:
            report[type(module).__name__] = (module.num_parameters(), module.expected_parameter_count())
    return report
