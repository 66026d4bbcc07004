import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfme.clones import CloneEnsemble
from dfme.generators import (ConfigurationError, GeneratorEnsemble, disagreement_loss,
                             disagreement_per_sample, diversity_loss, lambda_schedule,
                             partition_batch)
from dfme.nn import Dense, DenseNetwork, Param
from dfme.optim import Adam


def sizes_of(blocks):
    return [len(b) for b in blocks]


def test_partition_examples():
    assert sizes_of(partition_batch(250, 8)) == [32, 32, 31, 31, 31, 31, 31, 31]
    assert partition_batch(250, 1) == [range(0, 250)]
    assert partition_batch(8, 8) == [range(i, i + 1) for i in range(8)]
    with pytest.raises(ConfigurationError):
        partition_batch(3, 4)


@given(b=st.integers(1, 500), n=st.integers(1, 64))
def test_partition_blocks_cover_the_batch_contiguously(b, n):
    if n > b:
        with pytest.raises(ConfigurationError):
            partition_batch(b, n)
        return
    blocks = partition_batch(b, n)
    assert [i for blk in blocks for i in blk] == list(range(b))
    s = sizes_of(blocks)
    assert max(s) - min(s) <= 1
    assert s == sorted(s, reverse=True)


def constant_generator(value, noise_dim=3, out=4):
    return DenseNetwork([Dense(Param(np.zeros((noise_dim, out))), Param(np.full(out, float(value))))])


def test_rows_come_from_their_own_generator():
    ens = GeneratorEnsemble([constant_generator(0), constant_generator(1)], noise_dim=3)
    x = ens.generate(10, np.random.default_rng(0))
    np.testing.assert_array_equal(x[:5], 0.0)
    np.testing.assert_array_equal(x[5:], 1.0)


def test_same_seed_gives_identical_batches():
    ens = GeneratorEnsemble.init(3, 10, [16], 5, np.random.default_rng(0))
    a = ens.generate(50, np.random.default_rng(9))
    b = ens.generate(50, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def phase_macs(n, batch=250, noise=100, hidden=(128,), out=64):
    ens = GeneratorEnsemble.init(n, noise, list(hidden), out, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = ens.generate(batch, rng)
    fwd = ens.macs
    ens.backward(np.ones_like(x))
    return fwd, ens.macs - fwd


def test_multiply_add_count_is_independent_of_ensemble_size():
    counts = {n: phase_macs(n) for n in (1, 4, 8)}
    assert counts[1] == counts[4] == counts[8]
    fwd, _ = counts[1]
    assert fwd == 250 * (100 * 128 + 128 * 64)


def test_stacked_ensemble_matches_separate_networks_bit_for_bit():
    rng = np.random.default_rng(0)
    nets = [DenseNetwork.init([5, 7, 3], rng, output="tanh") for _ in range(3)]
    ref = [n.copy() for n in nets]
    opts = [Adam(n, 1e-2) for n in ref]
    ens = GeneratorEnsemble(nets, 5, lr=1e-2)
    for _ in range(4):
        z, g = rng.standard_normal((10, 5)), rng.standard_normal((10, 3))
        x = ens.forward(z)
        ens.backward(g)
        ens.step()
        parts = []
        for net, opt, blk in zip(ref, opts, partition_batch(10, 3)):
            parts.append(net.forward(z[blk.start:blk.stop]))
            net.backward(g[blk.start:blk.stop])
            opt.step()
        np.testing.assert_array_equal(x, np.concatenate(parts))
    for a, b in zip(ens.members, ref):
        np.testing.assert_array_equal(a.flat_parameters(), b.flat_parameters())


def test_gradient_of_one_block_reaches_only_its_generator():
    ens = GeneratorEnsemble.init(4, 6, [8], 3, np.random.default_rng(0))
    x = ens.generate(10, np.random.default_rng(1))
    blocks = partition_batch(10, 4)
    for j, blk in enumerate(blocks):
        ens.zero_grad()
        g = np.zeros_like(x)
        g[blk.start:blk.stop] = np.random.default_rng(j).standard_normal((len(blk), 3))
        ens.backward(g)
        for p in ens.parameters():
            others = np.delete(p.grad, j, axis=0)
            np.testing.assert_array_equal(others, 0.0)
            assert np.any(p.grad[j] != 0)


# -- losses -----------------------------------------------------------------


def test_disagreement_examples():
    same = np.array([[[0.3, 0.7]], [[0.3, 0.7]]])
    np.testing.assert_array_equal(disagreement_per_sample(same), [0.0])
    opposite = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    np.testing.assert_allclose(disagreement_per_sample(opposite), [0.5], atol=1e-15)
    three = np.array([[[1.0, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]]])
    np.testing.assert_allclose(disagreement_per_sample(three), [math.sqrt(2) / 3], atol=1e-15)
    assert abs(math.sqrt(2) / 3 - 0.4714) < 1e-4
    with pytest.raises(ConfigurationError):
        disagreement_per_sample(np.ones((1, 2, 2)) / 2)


def test_disagreement_gradient_is_zero_where_clones_agree():
    p = np.array([[[0.3, 0.7]], [[0.3, 0.7]]])
    value, grad = disagreement_loss(p)
    assert value == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_diversity_examples():
    one_class = np.zeros((2, 4, 3))
    one_class[..., 1] = 1.0
    assert diversity_loss(one_class)[0] == 0.0
    uniform = np.full((2, 4, 5), 0.2)
    assert abs(diversity_loss(uniform)[0] - math.log(5)) < 1e-12
    split = np.zeros((1, 4, 2))
    split[0, :2, 0] = 1.0
    split[0, 2:, 1] = 1.0
    assert abs(diversity_loss(split)[0] - math.log(2)) < 1e-12


def test_diversity_is_computed_over_the_combined_batch():
    rng = np.random.default_rng(0)
    clones = fixed_clones(k=3)
    ens = GeneratorEnsemble.init(4, 6, [8], 8, rng)
    x = ens.generate(20, np.random.default_rng(2))
    probs = clones.member_probs(x)
    # brute force: average every (clone, sample) distribution, then entropy
    avg = [sum(probs[m, b, k] for m in range(2) for b in range(20)) / 40 for k in range(3)]
    brute = -sum(a * math.log(a) for a in avg if a > 0)
    assert abs(diversity_loss(probs)[0] - brute) < 1e-12
    per_block = [diversity_loss(probs[:, blk.start:blk.stop])[0] for blk in partition_batch(20, 4)]
    assert not np.allclose(per_block, brute)


def test_lambda_schedule():
    assert lambda_schedule(10) == 0.2
    assert lambda_schedule(0) == 0.4
    assert lambda_schedule(90) == 0.04
    assert lambda_schedule(100) == 4 / 110
    with pytest.raises(ValueError):
        lambda_schedule(-1)


# -- training ---------------------------------------------------------------


def fixed_clones(k=2, seed=0):
    clones = CloneEnsemble.init(2, [8, 16, 10], np.random.default_rng(seed))
    for c in range(k):
        clones.discover(c)
    # discovery zeroes the new units' weights; randomize them so the clones differ
    rng = np.random.default_rng(seed + 100)
    for m in clones.members:
        m.layers[-1].weight.data[:, :k] = rng.standard_normal((16, k))
    return clones


def test_zero_batches_leave_generators_unchanged():
    ens = GeneratorEnsemble.init(2, 6, [8], 8, np.random.default_rng(0))
    before = [p.data.copy() for p in ens.parameters()]
    assert ens.train(fixed_clones(), 0, 20, 0.3, np.random.default_rng(1)) is None
    for a, p in zip(before, ens.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_training_leaves_clones_bit_identical():
    clones = fixed_clones()
    before = [m.flat_parameters() for m in clones.members]
    ens = GeneratorEnsemble.init(2, 6, [8], 8, np.random.default_rng(0))
    ens.train(clones, 5, 20, 0.3, np.random.default_rng(1))
    for a, m in zip(before, clones.members):
        np.testing.assert_array_equal(a, m.flat_parameters())


def test_diversity_rises_over_200_batches_against_fixed_clones():
    clones = fixed_clones(k=2, seed=3)
    ens = GeneratorEnsemble.init(4, 10, [32], 8, np.random.default_rng(0), lr=1e-2)
    rng = np.random.default_rng(1)
    lam = lambda_schedule(2)
    probe = np.random.default_rng(5).standard_normal((200, 10))

    def probe_diversity():
        return diversity_loss(clones.member_probs(ens.forward(probe)))[0]

    start = probe_diversity()
    reports = [ens.train(clones, 1, 40, lam, rng) for _ in range(200)]
    assert probe_diversity() > start
    first = np.mean([r.diversity for r in reports[:20]])
    last = np.mean([r.diversity for r in reports[-20:]])
    assert last > first


def test_state_dict_round_trip_continues_identically():
    import json

    clones = fixed_clones()
    ens = GeneratorEnsemble.init(3, 6, [8], 8, np.random.default_rng(0))
    ens.train(clones, 3, 20, 0.3, np.random.default_rng(1))
    twin = GeneratorEnsemble.from_state_dict(json.loads(json.dumps(ens.state_dict())))
    for e in (ens, twin):
        e.train(clones, 2, 20, 0.3, np.random.default_rng(2))
    for a, b in zip(ens.parameters(), twin.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), b=st.integers(6, 40), seed=st.integers(0, 1000))
def test_generated_rows_equal_member_outputs(n, b, seed):
    ens = GeneratorEnsemble.init(n, 4, [5], 3, np.random.default_rng(seed))
    z = np.random.default_rng(seed + 1).standard_normal((b, 4))
    x = ens.forward(z)
    for g, blk in zip(ens.members, partition_batch(b, n)):
        np.testing.assert_allclose(x[blk.start:blk.stop], g.forward(z[blk.start:blk.stop]),
                                   rtol=0, atol=1e-14)
