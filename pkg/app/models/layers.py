from typing import Iterable, Mapping

import numpy as np

from app.core.autodiff import Parameter, Tensor, conv2d, get_default_dtype, relu, reshape
from app.core.errors import ConfigurationError, ShapeError


class Module:
    """Named parameter container; names are dotted paths unique within a network."""

    def children(self) -> Iterable["Module"]:
        return ()

    def own_parameters(self) -> Iterable[Parameter]:
        return ()

    def parameters(self) -> dict[str, Parameter]:
        params = {p.name: p for p in self.own_parameters()}
        for child in self.children():
            params.update(child.parameters())
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.parameters().items()}

    def load_state_dict(self, tensors: Mapping[str, np.ndarray]) -> None:
        for name, param in self.parameters().items():
            if name not in tensors:
                raise ConfigurationError(f"Checkpoint has no tensor {name}")
            value = np.asarray(tensors[name])
            if value.shape != param.shape:
                raise ShapeError(f"Checkpoint tensor {name} has shape {value.shape}, network expects {param.shape}")
            param.data = value.astype(param.data.dtype)

    def num_parameters(self) -> int:
        return sum(param.size for param in self.parameters().values())


def init_weight(shape: tuple[int, ...], mode: str, rng: np.random.Generator) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    if mode == "zero":
        return np.zeros(shape)
    std = np.sqrt(2.0 / fan_in)
    if mode == "small":
        std *= 1e-2
    elif mode != "kaiming":
        raise ConfigurationError(f"Unknown init mode {mode!r}")
    return rng.normal(0.0, std, size=shape)


class Conv2d(Module):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, bias: bool = True, init: str = "kaiming"):
        dtype = get_default_dtype()
        self.weight = Parameter(init_weight((out_channels, in_channels, kernel_size, kernel_size), init, rng),
                                name=f"{name}.weight", dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), name=f"{name}.bias", dtype=dtype) if bias else None

    def own_parameters(self):
        return (self.weight,) if self.bias is None else (self.weight, self.bias)

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, padding="same")
        if self.bias is not None:
            out = out + reshape(self.bias, (1, -1, 1, 1))
        return out


class ChannelAffine(Module):
    """Learnable per-channel scale and shift; stands in for batch normalisation."""

    def __init__(self, name: str, channels: int):
        dtype = get_default_dtype()
        self.scale = Parameter(np.ones(channels), name=f"{name}.scale", dtype=dtype)
        self.shift = Parameter(np.zeros(channels), name=f"{name}.shift", dtype=dtype)

    def own_parameters(self):
        return self.scale, self.shift

    def __call__(self, x: Tensor) -> Tensor:
        return x * reshape(self.scale, (1, -1, 1, 1)) + reshape(self.shift, (1, -1, 1, 1))


class ConvStack(Module):
    """conv+bias+relu, (depth-2) x conv+affine+relu, then a linear conv."""

    def __init__(self, name: str, in_channels: int, width: int, out_channels: int, depth: int,
                 kernel_size: int, rng: np.random.Generator, last_init: str = "kaiming"):
        if depth < 2:
            raise ConfigurationError(f"depth must be at least 2, got {depth}")
        self.first = Conv2d(f"{name}.0", in_channels, width, kernel_size, rng)
        self.middle = [
            (Conv2d(f"{name}.{i}", width, width, kernel_size, rng, bias=False), ChannelAffine(f"{name}.{i}.affine", width))
            for i in range(1, depth - 1)
        ]
        self.last = Conv2d(f"{name}.{depth - 1}", width, out_channels, kernel_size, rng, init=last_init)

    def children(self):
        yield self.first
        for conv, affine in self.middle:
            yield conv
            yield affine
        yield self.last

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.first(x))
        for conv, affine in self.middle:
            h = relu(affine(conv(h)))
        return self.last(h)


def conv_stack_parameter_count(in_channels: int, width: int, out_channels: int, depth: int, kernel_size: int) -> int:
    taps = kernel_size * kernel_size
    first = in_channels * width * taps + width
    middle = (depth - 2) * (width * width * taps + 2 * width)
    last = width * out_channels * taps + out_channels
    return first + middle + last
