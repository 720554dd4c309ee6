"""Dense tensors with reverse-mode differentiation.

Only what the refiner, the consistency nets and the estimator need: broadcasting
elementwise arithmetic, reductions, reshapes, channel concatenation and a
cross-correlation ``conv2d``. Every node can carry an injected gradient that
replaces the upstream gradient arriving at it during ``backward``; the refiner
trainer uses this to substitute the rescaled gradient for the one computed
with respect to the refiner outputs.
"""
import contextlib
import contextvars
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.core.config import settings
from app.core.errors import GraphError, NonFiniteError, ShapeError


_DTYPES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}
_default_dtype = _DTYPES[settings.precision]
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"Unsupported precision {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; used for inference and frozen networks."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def precision(name: str):
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous.name)


Injection = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


class Tensor:

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data: np.ndarray = np.asarray(data, dtype=dtype or _default_dtype)
        if settings.check_finite and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"Non-finite values in tensor {name or ''}".strip())
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple["Tensor", ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"
        self._injection: Optional[Injection] = None

    # --- convenience ---
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{req}{nm})"

    # --- gradient injection ---
    def inject(self, value: Optional[Injection]) -> "Tensor":
        """Replace the gradient arriving at this node during backward.

        ``value`` is either a fixed array of this node's shape or a callable that
        receives the computed upstream gradient and returns its replacement.
        ``None`` removes a previous injection.
        """
        if value is not None and not callable(value):
            value = np.asarray(value, dtype=self.data.dtype)
            if value.shape != self.shape:
                raise ShapeError(f"Injected gradient shape {value.shape} does not match node shape {self.shape}")
        self._injection = value
        return self

    def _resolve_injection(self, computed: np.ndarray) -> np.ndarray:
        injected = self._injection(computed) if callable(self._injection) else self._injection
        injected = np.asarray(injected, dtype=computed.dtype)
        if injected.shape != self.shape:
            raise ShapeError(f"Injected gradient shape {injected.shape} does not match node shape {self.shape}")
        return injected

    # --- operators ---
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: int):
        return pow_int(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def relu(self) -> "Tensor":
        return relu(self)

    def abs(self) -> "Tensor":
        return absolute(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> "GradientMap":
        return backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


class GradientMap(dict):
    """Gradients of the differentiated loss keyed by leaf tensor."""

    def by_name(self) -> dict[str, np.ndarray]:
        return {leaf.name: grad for leaf, grad in self.items() if leaf.name is not None}


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    data = np.asarray(data)
    if settings.check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out.grad = None
    out._parents = ()
    out._backward_fn = None
    out._injection = None
    out._op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"Shapes {a.shape} and {b.shape} are not broadcast-compatible for {op}")


# --- elementwise ---
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", backward_fn)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    # np.sign(0) == 0 gives the zero subgradient at the kink
    def backward_fn(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), "abs", backward_fn)


def pow_int(a, exponent: int) -> Tensor:
    if not isinstance(exponent, (int, np.integer)) or exponent < 0:
        raise ValueError(f"pow_int needs a non-negative integer exponent, got {exponent!r}")
    a = as_tensor(a)
    exponent = int(exponent)

    def backward_fn(g):
        if exponent == 0:
            return (np.zeros_like(a.data),)
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data ** exponent, (a,), f"pow{exponent}", backward_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        return (g * (a.data > 0),)

    return _result(np.maximum(a.data, 0), (a,), "relu", backward_fn)


def identity(a, op: str = "identity") -> Tensor:
    """Pass-through node; gives a branch of the graph its own gradient slot."""
    a = as_tensor(a)
    return _result(a.data, (a,), op, lambda g: (g,))


# --- reductions and shape ---
def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), "sum", backward_fn)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(reduce_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"Cannot reshape {a.shape} into {shape}")

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _result(data, (a,), "reshape", backward_fn)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"Cannot broadcast {a.shape} to {shape}")

    def backward_fn(g):
        return (_unbroadcast(g, a.shape),)

    return _result(data, (a,), "broadcast", backward_fn)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"Cannot concatenate shapes {[t.shape for t in tensors]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(data, tensors, "concat", backward_fn)


def take(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)
    data = a.data[index]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(np.array(data), (a,), "take", backward_fn)


# --- convolution ---
def conv2d(x, kernel, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` [C_in,H,W] or [N,C_in,H,W] with ``kernel`` [C_out,C_in,kH,kW].

    ``same`` zero-pads so the output keeps the spatial size; ``valid`` does not pad.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), kernel, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects a 3-D/4-D input and a 4-D kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"Input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}")
    kh, kw = kernel.shape[2:]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"Same padding needs odd kernel extents, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if x.shape[2] < kh or x.shape[3] < kw:
            raise ShapeError(f"Input {x.shape[2:]} smaller than kernel {kh}x{kw} for valid padding")
    else:
        raise ShapeError(f"Unknown padding mode {padding!r}")

    height, width = x.shape[2:]
    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, kernel.data, optimize=True)

    def backward_fn(g):
        grad_kernel = np.einsum("nohw,nchwij->ocij", g, windows, optimize=True)
        grad_padded = np.zeros_like(padded)
        out_h, out_w = g.shape[2:]
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + out_h, j:j + out_w] += np.einsum(
                    "nohw,oc->nchw", g, kernel.data[:, :, i, j], optimize=True
                )
        return grad_padded[:, :, ph:ph + height, pw:pw + width], grad_kernel

    return _result(np.ascontiguousarray(out), (x, kernel), "conv2d", backward_fn)


# --- graph traversal ---
def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        status = state.get(key)
        if status == 2:
            continue
        if status == 1:
            raise GraphError(f"Cycle detected at node {node!r}")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and state.get(id(parent)) != 2:
                stack.append((parent, False))
    return order


def ancestors(node: Tensor) -> set[int]:
    """Ids of every differentiable node ``node`` depends on (itself excluded)."""
    seen: set[int] = set()
    stack = list(node._parents)
    while stack:
        current = stack.pop()
        if id(current) in seen or not current.requires_grad:
            continue
        seen.add(id(current))
        stack.extend(current._parents)
    return seen


def backward(loss: Tensor) -> GradientMap:
    """Populate ``.grad`` on every differentiable node reachable from ``loss``.

    Gradients are assigned, not accumulated across calls. A node with an injected
    gradient propagates the injected tensor to its parents instead of the
    gradient computed from its consumers.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return GradientMap()
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves = GradientMap()
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._injection is not None:
            grad = node._resolve_injection(grad)
        node.grad = grad
        if node._backward_fn is None:
            leaves[node] = grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise ShapeError(f"Gradient shape {parent_grad.shape} does not match {parent.shape} in {node._op}")
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return leaves


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = None
