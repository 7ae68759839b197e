import numpy as np
import pytest

import constants
from checks import finite_difference_grads, gradcheck_network
from core_math import Rng, rng_normal, rng_uniform
from errors import ParameterCeilingError, ShapeMismatchError
from nn_engine import LayerSpec, Network, backward, error_rate, forward, materialize_per_sample_grads, nll_loss
from utils import relative_error


def _zero(net: Network):
    for group in net.groups:
        net.set_flat(group, np.zeros(group.size))


def test_zero_weight_network_gives_uniform_logprobs(rng):
    net = Network((4,), [LayerSpec.dense(10), LayerSpec.logsoftmax()], rng)
    _zero(net)
    out, _ = forward(net, rng_normal(rng, (3, 4)))
    np.testing.assert_allclose(out, np.full((3, 10), np.log(0.1)), rtol=1e-12)
    assert out[0, 0] == pytest.approx(-2.302585, abs=1e-6)


def test_eval_mode_is_deterministic(rng):
    net = gradcheck_network(rng)
    x = rng_normal(Rng(5), (2, 1, 6, 6))
    a, _ = forward(net, x, constants.EVAL)
    b, _ = forward(net, x, constants.EVAL)
    assert np.array_equal(a, b)


def test_dense_affine_map(rng):
    net = Network((1,), [LayerSpec.dense(1)], rng)
    group_w, group_b = net.groups
    net.set_flat(group_w, np.array([2.0]))
    net.set_flat(group_b, np.array([1.0]))
    out, _ = forward(net, np.array([[3.0]]))
    assert out[0, 0] == 7.0


def test_forward_rejects_wrong_input_shape(rng):
    net = gradcheck_network(rng)
    with pytest.raises(ShapeMismatchError):
        forward(net, np.zeros((2, 1, 5, 5)))


def test_train_mode_dropout_needs_rng(rng):
    net = gradcheck_network(rng)
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 1, 6, 6)), constants.TRAIN)


def test_nll_loss_examples():
    assert nll_loss(np.full((1, 10), np.log(0.1)), [3]) == pytest.approx(2.302585, abs=1e-6)
    assert nll_loss(np.array([[0.0, -50.0]]), [0]) == 0.0
    assert nll_loss(np.array([[-1.0, -9.0], [-9.0, -3.0]]), [0, 1]) == 2.0


def test_nll_loss_rejects_bad_targets():
    with pytest.raises(IndexError):
        nll_loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ShapeMismatchError):
        nll_loss(np.zeros((2, 3)), [0])


def test_group_names(rng):
    net = gradcheck_network(rng)
    assert [g.name for g in net.groups] == ["conv1.weight", "conv1.bias", "fc1.weight", "fc1.bias",
                                            "fc2.weight", "fc2.bias"]
    merged = Network((1, 6, 6), [LayerSpec.conv2d(2, 3), LayerSpec.flatten(), LayerSpec.dense(3)], rng,
                     merge_bias=True)
    assert [g.name for g in merged.groups] == ["conv1", "fc1"]
    assert merged.group("fc1").size == 2 * 4 * 4 * 3 + 3


def test_backward_matches_finite_differences():
    rng = Rng(11)
    net = gradcheck_network(rng.child(0))
    images = rng_normal(rng.child(1), (4, 1, 6, 6))
    labels = np.array([0, 2, 1, 1])
    _, cache = forward(net, images, constants.TRAIN, Rng(99))
    analytic = backward(net, cache, labels)
    numeric = finite_difference_grads(net, images, labels, 99)
    for name, g in numeric.items():
        assert relative_error(analytic[name].batch_grad, g) <= 1e-5, name


def test_per_sample_grads_average_to_batch_grad():
    rng = Rng(3)
    net = gradcheck_network(rng.child(0))
    images = rng_normal(rng.child(1), (5, 1, 6, 6))
    labels = np.array([0, 1, 2, 0, 1])
    _, cache = forward(net, images, constants.TRAIN, Rng(4))
    stats = backward(net, cache, labels)
    samples = materialize_per_sample_grads(net, cache, labels)
    for group in net.groups:
        per = np.stack([s[group.name] for s in samples])
        np.testing.assert_allclose(per.mean(axis=0), stats[group.name].batch_grad, atol=1e-12)


def test_streaming_sumsq_matches_materialized():
    rng = Rng(8)
    net = gradcheck_network(rng.child(0))
    images = rng_normal(rng.child(1), (7, 1, 6, 6))
    labels = np.arange(7) % 3
    hdiag = {g.name: rng_uniform(rng.child(2), (g.size,), 0.5, 2.0) for g in net.groups}
    _, cache = forward(net, images, constants.TRAIN, Rng(9))
    stats = backward(net, cache, labels, hdiag, chunk_size=3)
    samples = materialize_per_sample_grads(net, cache, labels)
    for group in net.groups:
        per = np.stack([s[group.name] for s in samples])
        expected = float(np.sum(per * per / hdiag[group.name]))
        assert stats[group.name].per_sample_sumsq == pytest.approx(expected, rel=1e-9)
        np.testing.assert_array_equal(stats[group.name].hdiag, hdiag[group.name])


def test_identical_samples_give_n_times_quadratic_form(rng):
    net = Network((3,), [LayerSpec.dense(4), LayerSpec.logsoftmax()], rng)
    x = np.tile(rng_normal(Rng(2), (1, 3)), (6, 1))
    labels = np.full(6, 2)
    _, cache = forward(net, x)
    ones = {g.name: np.ones(g.size) for g in net.groups}
    stats = backward(net, cache, labels, ones)
    for group in net.groups:
        g = stats[group.name].batch_grad
        assert stats[group.name].per_sample_sumsq == pytest.approx(6 * float(g @ g), rel=1e-12)


def test_single_sample_grad_equals_batch_grad(rng):
    net = gradcheck_network(rng)
    images = rng_normal(Rng(1), (1, 1, 6, 6))
    _, cache = forward(net, images, constants.TRAIN, Rng(2))
    stats = backward(net, cache, [1])
    (sample,) = materialize_per_sample_grads(net, cache, [1])
    for group in net.groups:
        np.testing.assert_allclose(sample[group.name], stats[group.name].batch_grad, atol=1e-12)


def test_dense_per_sample_grad_is_rank_one_outer_product(rng):
    net = Network((2,), [LayerSpec.dense(2)], rng)
    layer = net.layers[0]
    dz = np.array([[1.0, 0.0]])
    a = np.array([[2.0, 3.0]])
    grads = layer.sample_grads((dz, a))
    np.testing.assert_array_equal(grads["weight"][0], [[2.0, 3.0], [0.0, 0.0]])


def test_hdiag_callable_is_called_once_per_group(rng):
    net = gradcheck_network(rng)
    images = rng_normal(Rng(1), (3, 1, 6, 6))
    _, cache = forward(net, images, constants.TRAIN, Rng(2))
    calls = []

    def hdiag(group, g):
        calls.append(group.name)
        return np.full_like(g, 2.0)

    stats = backward(net, cache, [0, 1, 2], hdiag)
    assert sorted(calls) == sorted(g.name for g in net.groups)
    assert all(s.per_sample_sumsq is not None for s in stats.values())


def test_sample_stats_off_still_returns_hdiag(rng):
    net = gradcheck_network(rng)
    images = rng_normal(Rng(1), (3, 1, 6, 6))
    _, cache = forward(net, images, constants.TRAIN, Rng(2))
    stats = backward(net, cache, [0, 1, 2], lambda group, g: np.ones_like(g), sample_stats=False)
    for s in stats.values():
        assert s.per_sample_sumsq is None
        np.testing.assert_array_equal(s.hdiag, np.ones_like(s.batch_grad))


def test_hdiag_shape_mismatch(rng):
    net = gradcheck_network(rng)
    _, cache = forward(net, np.zeros((2, 1, 6, 6)))
    bad = {g.name: np.ones(g.size + 1) for g in net.groups}
    with pytest.raises(ShapeMismatchError):
        backward(net, cache, [0, 1], bad)


def test_materialize_refuses_large_networks(rng):
    net = gradcheck_network(rng)
    _, cache = forward(net, np.zeros((2, 1, 6, 6)))
    with pytest.raises(ParameterCeilingError):
        materialize_per_sample_grads(net, cache, [0, 1], ceiling=10)


def test_maxpool_ties_route_to_first_index(rng):
    net = Network((1, 2, 2), [LayerSpec.maxpool2d(2), LayerSpec.flatten(), LayerSpec.dense(2),
                              LayerSpec.logsoftmax()], rng)
    pool = net.layers[0]
    x = np.ones((1, 1, 2, 2))
    y, ctx = pool.forward(x, constants.EVAL, None)
    dx, _ = pool.backward(np.array([[[[5.0]]]]), ctx, True)
    assert y[0, 0, 0, 0] == 1.0
    np.testing.assert_array_equal(dx[0, 0], [[5.0, 0.0], [0.0, 0.0]])


def test_error_rate_on_perfect_labels(rng):
    net = Network((2,), [LayerSpec.dense(2), LayerSpec.logsoftmax()], rng)
    weight, bias = net.groups
    net.set_flat(weight, np.array([1.0, 0.0, 0.0, 1.0]))
    net.set_flat(bias, np.zeros(2))
    images = np.array([[3.0, 0.0], [0.0, 3.0], [1.0, 2.0]])
    assert error_rate(net, images, np.array([0, 1, 1])) == 0.0
    assert error_rate(net, images, np.array([1, 1, 1])) == pytest.approx(1 / 3)


def test_float32_network_keeps_dtype():
    net = gradcheck_network(Rng(0))
    net32 = Network(net.input_shape, [layer.spec for layer in net.layers], Rng(0), np.float32)
    out, cache = forward(net32, np.zeros((2, 1, 6, 6), dtype=np.float32))
    assert out.dtype == np.float32
    stats = backward(net32, cache, [0, 1])
    assert stats["fc2.weight"].batch_grad.dtype == np.float32
