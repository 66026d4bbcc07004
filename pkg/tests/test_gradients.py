"""Analytic gradients against central finite differences, 100 seeds per loss.

Networks are small (at most three layers, at most 16 units). The tolerance
is 1e-4 on the norm-wise relative error of every parameter tensor.
"""

import numpy as np
import pytest

from conftest import numeric_grad, rel_error
from dfme.clones import CloneEnsemble, soft_label_terms
from dfme.generators import (GeneratorEnsemble, disagreement_loss, diversity_loss,
                             generator_objective)
from dfme.nn import DenseNetwork, cross_entropy, softmax, softmax_backward
from dfme.victim import pseudo_logits

SEEDS = range(100)
TOL = 1e-4


def random_net(rng, out_dim=None, output="linear"):
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(2, 17)) for _ in range(depth + 1)]
    if out_dim is not None:
        sizes[-1] = out_dim
    hidden = str(rng.choice(["relu", "tanh"]))
    return DenseNetwork.init(sizes, rng, hidden=hidden, output=output)


def check_network_loss(net, x, loss_and_grad):
    """``loss_and_grad(outputs) -> (scalar, dL/doutputs)``; compares every parameter grad."""
    net.zero_grad()
    _, g = loss_and_grad(net.forward(x))
    net.backward(g)
    for p in net.parameters():
        num = numeric_grad(lambda: loss_and_grad(net.forward(x))[0], p.data)
        assert rel_error(p.grad, num) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_network_gradient(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    b, k = int(rng.integers(1, 6)), net.output_dim
    x = rng.standard_normal((b, net.input_dim))
    t = rng.integers(0, k, size=b)

    def lg(z):
        losses, g = cross_entropy(z, t)
        return losses.mean(), g

    check_network_loss(net, x, lg)


@pytest.mark.parametrize("seed", SEEDS)
def test_soft_label_mse_network_gradient(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    b, k = int(rng.integers(1, 6)), net.output_dim
    x = rng.standard_normal((b, net.input_dim))
    target = pseudo_logits(softmax(rng.standard_normal((b, k))))

    def lg(z):
        losses, g = soft_label_terms(z, target)
        return losses.mean(), g

    check_network_loss(net, x, lg)


def random_probs(rng, m, b, k):
    return softmax(rng.standard_normal((m, b, k)) * 2)


@pytest.mark.parametrize("seed", SEEDS)
def test_disagreement_gradient_wrt_probabilities(seed):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, int(rng.integers(2, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 6)))
    _, g = disagreement_loss(p)
    num = numeric_grad(lambda: disagreement_loss(p)[0], p)
    assert rel_error(g, num) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_diversity_gradient_wrt_probabilities(seed):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(2, 6)))
    _, g = diversity_loss(p)
    num = numeric_grad(lambda: diversity_loss(p)[0], p)
    assert rel_error(g, num) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_generator_objective_gradient_wrt_logits(seed):
    rng = np.random.default_rng(seed)
    m, b, k = int(rng.integers(2, 4)), int(rng.integers(1, 6)), int(rng.integers(2, 6))
    z = rng.standard_normal((m, b, k))
    lam = float(rng.uniform(0, 1))
    report, gp = generator_objective(softmax(z), lam)
    g = np.stack([softmax_backward(softmax(z[i]), gp[i]) for i in range(m)])
    num = numeric_grad(lambda: generator_objective(softmax(z), lam)[0].total, z)
    assert rel_error(g, num) < TOL
    assert report.total == report.disagreement + lam * report.diversity


@pytest.mark.parametrize("seed", SEEDS)
def test_generator_parameters_receive_the_negated_objective_gradient(seed):
    """End to end: generator params -> samples -> frozen clones -> L_G."""
    rng = np.random.default_rng(seed)
    n_gen, noise, dim, k = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 6)), 3
    gens = GeneratorEnsemble.init(n_gen, noise, [int(rng.integers(2, 9))], dim, rng)
    clones = CloneEnsemble.init(2, [dim, int(rng.integers(2, 9)), 6], rng)
    for c in range(k):
        clones.discover(c)
    b = n_gen + int(rng.integers(0, 5))
    z = rng.standard_normal((b, noise))
    lam = 0.3

    def objective():
        return generator_objective(clones.member_probs(gens.forward(z)), lam)[0].total

    x = gens.forward(z)
    probs = clones.member_probs(x)
    _, gp = generator_objective(probs, lam)
    gx = clones.input_gradient([softmax_backward(p, -g) for p, g in zip(probs, gp)])
    gens.zero_grad()
    gens.backward(gx)
    for p in gens.parameters():
        num = numeric_grad(objective, p.data)
        assert rel_error(p.grad, -num) < TOL


@pytest.mark.parametrize("seed", SEEDS[:20])
def test_masked_head_cross_entropy_gradient_ignores_inactive_units(seed):
    rng = np.random.default_rng(seed)
    clones = CloneEnsemble.init(2, [4, 8, 10], rng)
    for c in range(4):
        clones.discover(c)
    x = rng.standard_normal((5, 4))
    t = rng.integers(0, 4, size=5)
    net = clones.members[0]
    net.zero_grad()
    z = net.forward(x)
    _, g = cross_entropy(z[:, :4], t)
    full = np.zeros_like(z)
    full[:, :4] = g
    net.backward(full)
    w = net.layers[-1].weight

    def f():
        return cross_entropy(net.forward(x)[:, :4], t)[0].mean()

    assert rel_error(w.grad, numeric_grad(f, w.data)) < TOL
    np.testing.assert_array_equal(w.grad[:, 4:], 0.0)
