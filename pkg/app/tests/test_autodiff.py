import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from app.core import autodiff as ad
from app.core.autodiff import Parameter, Tensor, ancestors, backward, identity, is_grad_enabled, no_grad
from app.core.errors import NonFiniteError, ShapeError
from app.models.networks import ConsistencyNet, EstimatorNet, RefinerNet


def numeric_gradient(loss_of, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        saved = array[index]
        array[index] = saved + eps
        upper = loss_of()
        array[index] = saved - eps
        lower = loss_of()
        array[index] = saved
        grad[index] = (upper - lower) / (2 * eps)
    return grad


def assert_gradients_match(build, leaves, rtol=1e-4, atol=1e-8):
    """``build()`` returns a scalar tensor computed from ``leaves``."""
    loss = build()
    backward(loss)
    for leaf in leaves:
        numeric = numeric_gradient(lambda: build().item(), leaf.data)
        np.testing.assert_allclose(leaf.grad, numeric, rtol=rtol, atol=atol)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


@pytest.mark.parametrize(
    "op, shapes",
    [
        (ad.add, [(3, 4), (1, 4)]),
        (ad.sub, [(2, 3), (2, 3)]),
        (ad.mul, [(2, 3, 4), (3, 1)]),
        (lambda a: ad.pow_int(a, 3), [(3, 3)]),
        (lambda a: ad.reduce_sum(a, axis=1, keepdims=True), [(2, 5)]),
        (lambda a: ad.reduce_mean(a, axis=(0, 2)), [(2, 3, 4)]),
        (lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
        (lambda a: ad.broadcast_to(a, (2, 3, 4)), [(3, 1)]),
        (lambda a, b: ad.concat([a, b], axis=1), [(2, 1, 3), (2, 2, 3)]),
        (lambda a: ad.take(a, (slice(None), slice(1, 3))), [(3, 4)]),
    ],
)
def test_elementwise_and_shape_ops_match_finite_differences(float64, rng, op, shapes):
    leaves = [Parameter(rng.normal(size=shape), name=f"p{i}") for i, shape in enumerate(shapes)]
    weights = rng.normal(size=op(*leaves).shape)
    assert_gradients_match(lambda: weighted_sum(op(*leaves), weights), leaves)


def test_abs_and_relu_match_finite_differences_away_from_the_kink(float64, rng):
    values = rng.uniform(0.1, 1.0, size=(4, 4)) * rng.choice([-1.0, 1.0], size=(4, 4))
    leaf = Parameter(values, name="x")
    weights = rng.normal(size=(4, 4))
    assert_gradients_match(lambda: weighted_sum(ad.absolute(leaf) + ad.relu(leaf), weights), [leaf])


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv2d_matches_finite_differences(float64, rng, padding):
    x = Parameter(rng.normal(size=(2, 2, 5, 5)), name="x")
    kernel = Parameter(rng.normal(size=(3, 2, 3, 3)), name="k")
    weights = rng.normal(size=ad.conv2d(x, kernel, padding).shape)
    assert_gradients_match(lambda: weighted_sum(ad.conv2d(x, kernel, padding), weights), [x, kernel])


def test_conv2d_same_padding_matches_direct_correlation(float64, rng):
    x = rng.normal(size=(1, 1, 4, 4))
    kernel = rng.normal(size=(1, 1, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(kernel)).data
    padded = np.pad(x[0, 0], 1)
    expected = np.array([[np.sum(padded[i:i + 3, j:j + 3] * kernel[0, 0]) for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(out[0, 0], expected, rtol=1e-12)


def test_refiner_network_matches_finite_differences(float64, rng):
    net = RefinerNet(depth=2, width=3, heads=2, seed=1, last_init="kaiming")
    x = rng.uniform(0.2, 0.8, size=(1, 5, 5))
    weights = rng.normal(size=(1, 2, 5, 5))
    assert_gradients_match(lambda: weighted_sum(net(x), weights), list(net.parameters().values()))


def test_consistency_network_matches_finite_differences(float64, rng):
    net = ConsistencyNet("g", layers=3, width=3, seed=2)
    for param in net.parameters().values():
        param.data[...] = rng.normal(scale=0.5, size=param.shape)
    xhat = Tensor(rng.uniform(0.2, 0.8, size=(2, 1, 3, 3)))
    yhat = Tensor(rng.uniform(0.2, 0.8, size=(2, 1, 3, 3)))
    weights = rng.normal(size=(2, 1, 3, 3))
    assert_gradients_match(lambda: weighted_sum(net(xhat, yhat), weights), list(net.parameters().values()))


def test_estimator_network_matches_finite_differences(float64, rng):
    net = EstimatorNet(depth=2, width=3, outputs=2, seed=3)
    x = rng.uniform(0.2, 0.8, size=(1, 4, 4))
    weights = rng.normal(size=(1, 2, 4, 4))
    assert_gradients_match(lambda: weighted_sum(net(x), weights), list(net.parameters().values()))


def test_fixed_injection_replaces_the_arriving_gradient(float64):
    x = Parameter(np.array([1.0, 2.0]), name="x")
    middle = x * 3.0
    middle.inject(np.array([10.0, -1.0]))
    backward((middle * middle).sum())
    np.testing.assert_array_equal(x.grad, [30.0, -3.0])


def test_callable_injection_sees_the_computed_gradient(float64):
    x = Parameter(np.array([1.0, 2.0]), name="x")
    middle = identity(x)
    seen = []
    middle.inject(lambda computed: seen.append(computed.copy()) or 2.0 * computed)
    backward((middle * middle).sum())
    np.testing.assert_array_equal(seen[0], [2.0, 4.0])
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_injection_with_wrong_shape_is_rejected(float64):
    with pytest.raises(ShapeError):
        Parameter(np.zeros(3), name="x").inject(np.zeros(2))


def test_branch_gradients_are_recorded_on_identity_nodes(float64):
    x = Parameter(np.array([1.0, -1.0]), name="x")
    left, right = identity(x, "left"), identity(x, "right")
    backward((left * 2.0).sum() + (right * right).sum())
    np.testing.assert_array_equal(left.grad, [2.0, 2.0])
    np.testing.assert_array_equal(right.grad, [2.0, -2.0])
    np.testing.assert_array_equal(x.grad, [4.0, 0.0])


def test_ancestors_collect_every_upstream_parameter(float64):
    a = Parameter(np.ones(2), name="a")
    b = Parameter(np.ones(2), name="b")
    out = a * 2.0
    unrelated = b + out
    assert id(a) in ancestors(out)
    assert id(b) not in ancestors(out)
    assert {id(a), id(b)} <= ancestors(unrelated)


def test_no_grad_builds_no_graph(float64):
    a = Parameter(np.ones(3), name="a")
    with no_grad():
        out = (a * a).sum()
    assert not out.requires_grad
    assert backward(out) == {}


def test_no_grad_in_overlapping_threads_leaves_the_caller_untouched(float64):
    barrier = threading.Barrier(4)

    def inside(_):
        with no_grad():
            barrier.wait()
            return is_grad_enabled()

    with ThreadPoolExecutor(max_workers=4) as pool:
        flags = list(pool.map(inside, range(4)))
    assert flags == [False] * 4
    assert is_grad_enabled()
    a = Parameter(np.array([1.0, 2.0]), name="a")
    backward((a * a).sum())
    np.testing.assert_array_equal(a.grad, [2.0, 4.0])


def test_backward_assigns_rather_than_accumulates(float64):
    a = Parameter(np.array([3.0]), name="a")
    backward((a * a).sum())
    backward((a * a).sum())
    np.testing.assert_array_equal(a.grad, [6.0])


def test_backward_rejects_non_scalar_loss(float64):
    with pytest.raises(ShapeError):
        backward(Parameter(np.ones(2), name="a") * 1.0)


def test_non_finite_values_are_caught(float64):
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))
    with pytest.raises(NonFiniteError):
        ad.mul(Tensor(np.array([1e308])), 1e10)


def test_incompatible_shapes_raise_shape_error():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_precision_context_switches_the_default_dtype():
    with ad.precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    with ad.precision("float32"):
        assert Tensor([1.0]).data.dtype == np.float32
