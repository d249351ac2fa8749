import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ganem import autodiff as ad
from ganem.models import ENet, Discriminator, Generator, discriminate, e_embed, e_predict, generate, one_hot
from ganem.nn import mlp_forward


def _zero(layers):
    for layer in layers:
        layer.weight[...] = 0.0
        layer.bias[...] = 0.0


# ------------------------------------------------------------------ generator


def test_generator_input_width():
    gen = Generator(5, 3, 2, rng=np.random.default_rng(0))
    assert gen.layers[0].in_features == 8


def test_generate_is_deterministic():
    gen = Generator(4, 3, 2, rng=np.random.default_rng(0))
    z = np.random.default_rng(1).uniform(-1, 1, size=(6, 4))
    c = np.array([0, 1, 2, 0, 1, 2])
    assert generate(gen, z, c).tobytes() == generate(gen, z, c).tobytes()


def test_zero_weight_generator_outputs_bias():
    gen = Generator(3, 2, 4, out_activation=None, rng=np.random.default_rng(0))
    _zero(gen.layers)
    gen.layers[-1].bias[...] = [0.1, -0.2, 0.3, 0.0]
    z = np.random.default_rng(2).normal(size=(5, 3))
    out = generate(gen, z, [0, 1, 0, 1, 1])
    np.testing.assert_array_equal(out, np.tile([0.1, -0.2, 0.3, 0.0], (5, 1)))


def test_class_changes_output():
    gen = Generator(4, 3, 2, rng=np.random.default_rng(3))
    z = np.full(4, 0.3)
    outs = [generate(gen, z, c) for c in range(3)]
    assert not np.allclose(outs[0], outs[1]) and not np.allclose(outs[1], outs[2])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 4))
def test_generate_equals_concatenation_oracle(seed, k, n):
    rng = np.random.default_rng(seed)
    gen = Generator(3, k, 2, hidden=(5,), rng=rng)
    z = rng.uniform(-1, 1, size=(n, 3))
    c = rng.integers(k, size=n)
    joined = np.concatenate([z, np.eye(k)[c]], axis=1)
    np.testing.assert_array_equal(generate(gen, z, c), mlp_forward(gen.layers, joined).value)


@pytest.mark.parametrize("c", [-1, 3])
def test_class_out_of_range(c):
    gen = Generator(2, 3, 2)
    with pytest.raises(ValueError):
        generate(gen, np.zeros(2), c)


def test_one_hot_rows():
    np.testing.assert_array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])


def test_generator_noise_width_checked():
    with pytest.raises(ad.ShapeError):
        generate(Generator(4, 2, 2), np.zeros((3, 5)), [0, 1, 0])


# ------------------------------------------------------------------ discriminator


def test_zero_head_gives_half():
    disc = Discriminator(3, 4, rng=np.random.default_rng(0))
    disc.head.weight[...] = 0.0
    disc.head.bias[...] = 0.0
    out = discriminate(disc, np.random.default_rng(1).normal(size=(6, 3)))
    assert out.class_probs.shape == (6, 4) and out.extra_prob.shape == (6,)
    assert np.all(out.class_probs == 0.5) and np.all(out.extra_prob == 0.5)


def test_probabilities_are_sigmoids_of_logits():
    disc = Discriminator(3, 3, rng=np.random.default_rng(2))
    out = discriminate(disc, np.random.default_rng(3).normal(size=(20, 3)))
    np.testing.assert_allclose(out.class_probs, 1 / (1 + np.exp(-out.class_logits)), rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.extra_prob, 1 / (1 + np.exp(-out.extra_logit)), rtol=0, atol=1e-12)
    assert np.all((out.class_probs > 0) & (out.class_probs < 1))


def test_class_outputs_are_not_normalised():
    disc = Discriminator(4, 3, rng=np.random.default_rng(4))
    sums = discriminate(disc, np.random.default_rng(5).normal(size=(10, 4))).class_probs.sum(axis=1)
    assert np.all(np.abs(sums - 1.0) > 1e-6)


def test_scaling_one_head_leaves_others_alone():
    disc = Discriminator(3, 3, rng=np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(8, 3))
    before = discriminate(disc, x)
    disc.head.weight[1] *= 5.0
    disc.head.bias[1] *= 5.0
    after = discriminate(disc, x)
    np.testing.assert_array_equal(before.class_probs[:, [0, 2]], after.class_probs[:, [0, 2]])
    np.testing.assert_array_equal(before.extra_prob, after.extra_prob)
    assert not np.allclose(before.class_probs[:, 1], after.class_probs[:, 1])


def test_discriminator_dimension_checked():
    with pytest.raises(ad.ShapeError):
        discriminate(Discriminator(3, 2), np.zeros((2, 4)))


def test_single_sample_shapes():
    out = discriminate(Discriminator(3, 2, rng=np.random.default_rng(0)), np.zeros(3))
    assert out.class_probs.shape == (2,) and np.ndim(out.extra_prob) == 0


# ------------------------------------------------------------------ E-net


def test_zero_head_gives_uniform_simplex():
    enet = ENet(3, 4, rng=np.random.default_rng(0))
    enet.head.weight[...] = 0.0
    enet.head.bias[...] = 0.0
    np.testing.assert_array_equal(e_predict(enet, np.ones((2, 3))), np.full((2, 4), 0.25))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_prediction_is_on_the_simplex(seed):
    rng = np.random.default_rng(seed)
    enet = ENet(5, 3, hidden=(8,), rng=rng)
    p = e_predict(enet, rng.normal(scale=3.0, size=(7, 5)))
    assert np.all(p >= 0)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)


def test_embedding_width_matches_bottleneck():
    enet = ENet(6, 3, bottleneck=2, rng=np.random.default_rng(1))
    assert e_embed(enet, np.zeros((5, 6))).shape == (5, 2)


def test_embed_without_bottleneck():
    with pytest.raises(ValueError):
        e_embed(ENet(3, 2), np.zeros((1, 3)))


def test_embedding_feeds_the_head():
    enet = ENet(4, 3, hidden=(6,), bottleneck=2, rng=np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(5, 4))
    head = mlp_forward([enet.head], e_embed(enet, x)).value
    np.testing.assert_allclose(e_predict(enet, x), ad.softmax(ad.Tensor(head), axis=1).value, rtol=1e-14)


def test_equal_parameter_instances_agree():
    a = ENet(4, 3, rng=np.random.default_rng(5))
    b = copy.deepcopy(a)
    x = np.random.default_rng(6).normal(size=(9, 4))
    assert e_predict(a, x).tobytes() == e_predict(b, x).tobytes()
