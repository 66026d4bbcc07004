import numpy as np
import pytest

from dfme.nn import DenseNetwork, NetworkStateError
from dfme.optim import SGD, Adam, make_optimizer


def one_layer(rng=None):
    rng = rng or np.random.default_rng(0)
    return DenseNetwork.init([3, 2], rng)


def set_grads(net, value):
    for p in net.parameters():
        p.grad = np.full_like(p.data, value)


def test_sgd_with_unit_lr_subtracts_the_gradient():
    net = one_layer()
    before = [p.data.copy() for p in net.parameters()]
    rng = np.random.default_rng(1)
    grads = [rng.standard_normal(p.data.shape) for p in net.parameters()]
    for p, g in zip(net.parameters(), grads):
        p.grad = g.copy()
    SGD(net, lr=1.0, momentum=0.0).step()
    for p, b, g in zip(net.parameters(), before, grads):
        np.testing.assert_array_equal(p.data, b - g)
        assert p.grad is None


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_lr_leaves_parameters_unchanged(kind):
    net = one_layer()
    before = net.flat_parameters()
    opt = make_optimizer(kind, net, 0.0)
    set_grads(net, 0.3)
    opt.step()
    np.testing.assert_array_equal(net.flat_parameters(), before)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_step_without_gradients_is_a_state_error(kind):
    with pytest.raises(NetworkStateError):
        make_optimizer(kind, one_layer(), 0.1).step()


def test_adam_first_step_matches_hand_recurrence():
    # from zero state on constant gradient g: m = (1-b1) g, v = (1-b2) g^2,
    # m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps) ~= lr * sign(g)
    lr, eps, g = 0.01, 1e-8, 0.37
    net = one_layer()
    before = net.flat_parameters()
    opt = Adam(net, lr, eps=eps)
    set_grads(net, g)
    opt.step()
    expected = lr * g / (abs(g) + eps)
    np.testing.assert_allclose(before - net.flat_parameters(), expected, rtol=1e-12)
    assert abs(expected - lr) < 1e-9


def test_sgd_momentum_and_weight_decay_recurrence():
    net = one_layer()
    p0 = net.layers[0].weight.data.copy()
    opt = SGD(net, lr=0.1, momentum=0.9, weight_decay=0.01)
    g = 0.5
    set_grads(net, g)
    opt.step()
    v1 = g + 0.01 * p0
    p1 = p0 - 0.1 * v1
    np.testing.assert_allclose(net.layers[0].weight.data, p1, rtol=1e-15)
    set_grads(net, g)
    opt.step()
    v2 = 0.9 * v1 + g + 0.01 * p1
    np.testing.assert_allclose(net.layers[0].weight.data, p1 - 0.1 * v2, rtol=1e-14)


def test_identical_seed_and_ops_give_bit_identical_parameters():
    def run():
        rng = np.random.default_rng(7)
        net = DenseNetwork.init([4, 6, 3], rng)
        opt = Adam(net, 1e-2)
        for _ in range(20):
            out = net.forward(rng.standard_normal((8, 4)))
            net.backward(out - 1.0)
            opt.step()
        return net.flat_parameters()

    np.testing.assert_array_equal(run(), run())


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_optimizer_state_round_trip(kind):
    import json

    rng = np.random.default_rng(3)
    net = DenseNetwork.init([3, 4, 2], rng)
    opt = make_optimizer(kind, net, 0.05)
    for _ in range(3):
        net.forward(rng.standard_normal((5, 3)))
        net.backward(rng.standard_normal((5, 2)))
        opt.step()
    twin = net.copy()
    opt2 = make_optimizer(kind, twin, 0.05)
    opt2.load_state_dict(json.loads(json.dumps(opt.state_dict())))
    x, g = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    for n, o in ((net, opt), (twin, opt2)):
        n.forward(x)
        n.backward(g)
        o.step()
    np.testing.assert_array_equal(net.flat_parameters(), twin.flat_parameters())
