import numpy as np
import pytest

from app.core.autodiff import Tensor
from app.core.errors import ConfigurationError, ShapeError
from app.models.networks import ConsistencyBank, ConsistencyNet, EstimatorNet, RefinerNet, parameter_audit


def test_parameter_counts_match_their_closed_forms():
    refiner = RefinerNet(depth=4, width=8, heads=3, seed=0)
    bank = ConsistencyBank([1, 2, 3], layers=5, width=6, seed=0)
    estimator = EstimatorNet(depth=3, width=5, outputs=3, seed=0)
    for actual, expected in parameter_audit(refiner, bank, estimator).values():
        assert actual == expected


def test_desk_sized_refiner_parameter_count():
    refiner = RefinerNet(depth=17, width=64, heads=64, seed=0)
    first = 9 * 64 + 64
    middle = 15 * (64 * 64 * 9 + 2 * 64)
    last = 64 * 64 * 9 + 64
    assert refiner.num_parameters() == first + middle + last


def test_consistency_net_starts_at_zero(rng):
    net = ConsistencyNet("g1", layers=4, width=8, seed=3)
    xhat = Tensor(rng.uniform(size=(2, 1, 5, 5)))
    yhat = Tensor(rng.uniform(size=(2, 1, 5, 5)))
    assert np.all(net(xhat, yhat).data == 0.0)


def test_consistency_net_is_pointwise(float64, rng):
    net = ConsistencyNet("g1", layers=3, width=4, seed=3)
    for param in net.parameters().values():
        param.data[...] = rng.normal(size=param.shape)
    xhat = rng.uniform(size=(1, 1, 6, 6))
    yhat = rng.uniform(size=(1, 1, 6, 6))
    base = net(Tensor(xhat), Tensor(yhat)).data
    xhat[0, 0, 2, 3] += 0.3
    moved = net(Tensor(xhat), Tensor(yhat)).data
    changed = np.argwhere(moved != base)
    assert changed.tolist() == [[0, 0, 2, 3]]


def test_refiner_heads_start_close_to_the_input(rng):
    refiner = RefinerNet(depth=3, width=4, heads=5, seed=1)
    yhat = rng.uniform(size=(2, 8, 8))
    heads = refiner(yhat).data
    assert heads.shape == (2, 5, 8, 8)
    assert np.max(np.abs(heads - yhat[:, None])) < 0.2



def test_zero_initialised_refiner_returns_its_input_on_every_head(rng):
    refiner = RefinerNet(depth=3, width=4, heads=5, seed=1, last_init="zero")
    yhat = rng.uniform(size=(2, 8, 8))
    heads = refiner(yhat).data
    np.testing.assert_array_equal(heads, np.broadcast_to(yhat[:, None].astype(heads.dtype), heads.shape))


def test_refiner_commutes_with_translation_in_the_interior(float64, rng):
    refiner = RefinerNet(depth=3, width=4, heads=2, seed=1, last_init="kaiming")
    yhat = rng.uniform(size=(1, 24, 24))
    expected = refiner(yhat).data[..., 1:, 2:]
    actual = refiner(yhat[:, 1:, 2:]).data
    np.testing.assert_allclose(actual[..., 4:-4, 4:-4], expected[..., 4:-4, 4:-4], atol=1e-5)

def test_initialisation_depends_only_on_the_seed():
    a = RefinerNet(depth=3, width=4, heads=2, seed=9).state_dict()
    b = RefinerNet(depth=3, width=4, heads=2, seed=9).state_dict()
    c = RefinerNet(depth=3, width=4, heads=2, seed=10).state_dict()
    assert all(np.array_equal(a[name], b[name]) for name in a)
    assert any(not np.array_equal(a[name], c[name]) for name in a)


def test_bank_head_means_average_over_heads(float64, rng, affine_consistency):
    bank = ConsistencyBank([1, 2], layers=2, width=3, seed=0)
    affine_consistency(bank, 1.0)
    heads = Tensor(rng.uniform(size=(2, 4, 3, 3)))
    yhat = Tensor(rng.uniform(size=(2, 1, 3, 3)))
    means = bank.head_means(heads, yhat)
    expected = (yhat.data - heads.data).mean(axis=1, keepdims=True)
    assert len(means) == 2
    for mean in means:
        np.testing.assert_allclose(mean.data, expected, rtol=1e-12, atol=1e-14)


def test_state_dict_round_trips_through_load(rng):
    source = EstimatorNet(depth=2, width=3, outputs=2, seed=1)
    target = EstimatorNet(depth=2, width=3, outputs=2, seed=2)
    target.load_state_dict(source.state_dict())
    yhat = rng.uniform(size=(6, 6))
    np.testing.assert_array_equal(target.predict(yhat), source.predict(yhat))
    assert source.predict(yhat).shape == (2, 6, 6)


def test_mismatched_checkpoint_tensors_are_rejected():
    small = EstimatorNet(depth=2, width=3, outputs=2, seed=1)
    wide = EstimatorNet(depth=2, width=4, outputs=2, seed=1)
    with pytest.raises(ShapeError):
        small.load_state_dict(wide.state_dict())
    with pytest.raises(ConfigurationError):
        small.load_state_dict({})


def test_invalid_architectures_are_rejected():
    with pytest.raises(ConfigurationError):
        RefinerNet(depth=1, width=4, heads=2, seed=0)
    with pytest.raises(ConfigurationError):
        RefinerNet(depth=3, width=4, heads=0, seed=0)
    with pytest.raises(ConfigurationError):
        ConsistencyNet("g", layers=1, width=4, seed=0)
