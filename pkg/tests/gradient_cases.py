"""Random instances for the gradient suite: every op kind and every loss.

Each case maps an rng to ``(build, inputs)`` where ``build(graph, *tensors)``
returns a tensor; the scalar under test is its inner product with a fixed
random projection, so every output entry contributes to the gradient.
"""

import numpy as np

from ganem import autodiff as ad
from ganem.emcore import discriminator_loss, enet_loss, generator_loss
from ganem.models import Discriminator, ENet, Generator
from ganem.nn import gather_grads

from finite_diff import numeric_grad, rel_error


def _away_from(rng, shape, points, lo=-2.0, hi=2.0, gap=1e-3):
    """Uniform draws kept at least ``gap`` from each kink location."""
    x = rng.uniform(lo, hi, size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.sign(x[near] - p + 1e-300) * gap * 2
    return x


def _matmul(rng):
    n, k, m = rng.integers(1, 5, size=3)
    return (lambda g, a, b: ad.matmul(a, b)), [rng.normal(size=(n, k)), rng.normal(size=(k, m))]


def _broadcast_pair(rng):
    shape = tuple(rng.integers(1, 4, size=2))
    other = tuple(1 if rng.random() < 0.4 else s for s in shape)
    return [rng.normal(size=shape), rng.normal(size=other)]


def _binary(op):
    def case(rng):
        return (lambda g, a, b: op(a, b)), _broadcast_pair(rng)

    return case


def _unary(op, sampler):
    def case(rng):
        shape = tuple(rng.integers(1, 4, size=2))
        return (lambda g, a: op(a)), [sampler(rng, shape)]

    return case


def _normal(rng, shape):
    return rng.normal(size=shape)


def _reduce(op):
    def case(rng):
        shape = tuple(rng.integers(1, 4, size=3))
        axis = [None, 0, 1, 2, -1][rng.integers(5)]
        keep = bool(rng.integers(2))
        return (lambda g, a: op(a, axis=axis, keepdims=keep)), [rng.normal(size=shape)]

    return case


def _softmax_like(op):
    def case(rng):
        shape = tuple(rng.integers(1, 4, size=2))
        axis = int(rng.integers(-1, 2))
        return (lambda g, a: op(a, axis=axis)), [rng.normal(scale=2.0, size=shape)]

    return case


def _clamp(rng):
    shape = tuple(rng.integers(1, 4, size=2))
    lo, hi = -0.5, 0.7
    return (lambda g, a: ad.clamp(a, lo, hi)), [_away_from(rng, shape, (lo, hi), -1.5, 1.5)]


def _concat(rng):
    rows = int(rng.integers(1, 4))
    parts = [rng.normal(size=(rows, int(rng.integers(1, 4)))) for _ in range(int(rng.integers(2, 4)))]
    return (lambda g, *ts: ad.concat(ts, axis=1)), parts


def _slice(rng):
    x = rng.normal(size=(4, 5))
    idx = rng.integers(0, 4, size=6)
    cols = rng.integers(0, 5, size=6)
    keys = [(slice(1, 3), slice(None)), (idx, cols), (slice(None), 2), (idx,)]
    key = keys[rng.integers(len(keys))]
    return (lambda g, a: ad.slice_(a, key)), [x]


def _reshape(rng):
    x = rng.normal(size=(2, 6))
    shape = [(3, 4), (12,), (4, 3), (2, 2, 3)][rng.integers(4)]
    return (lambda g, a: ad.reshape(a, shape)), [x]


def _scale(rng):
    s = float(rng.normal())
    return (lambda g, a: ad.scale(a, s)), [rng.normal(size=(3, 2))]


def _mlp(rng):
    sizes = [3, 5, 4, 2]
    weights = [rng.normal(scale=0.7, size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [rng.normal(scale=0.3, size=b) for b in sizes[1:]]
    x = _away_from(rng, (4, 3), (0.0,))

    def build(g, x, w0, b0, w1, b1, w2, b2):
        h = ad.leaky_relu(ad.matmul(x, w0) + b0, 0.2)
        h = ad.tanh(ad.matmul(h, w1) + b1)
        return ad.sigmoid(ad.matmul(h, w2) + b2)

    return build, [x, weights[0], biases[0], weights[1], biases[1], weights[2], biases[2]]


def _gen_loss(rng):
    n = int(rng.integers(1, 8))
    return (lambda g, a: generator_loss(a)), [rng.uniform(-3, 3, size=n)]


def _disc_loss(fake_term):
    def case(rng):
        k = int(rng.integers(1, 5))
        n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        w = rng.dirichlet(np.ones(k), size=n)
        classes = rng.integers(k, size=m)
        weight = float(rng.uniform(0, 2))

        def build(g, real, fake, rx, fx):
            return discriminator_loss(
                real, w, fake, classes, fake_term=fake_term, real_extra=rx, fake_extra=fx, extra_weight=weight
            )

        return build, [rng.normal(size=(n, k)), rng.normal(size=(m, k)), rng.normal(size=n), rng.normal(size=m)]

    return case


def _enet_loss(from_logits):
    def case(rng):
        k = int(rng.integers(2, 5))
        n = int(rng.integers(1, 6))
        c = rng.integers(k, size=n)
        if from_logits:
            return (lambda g, a: enet_loss(a, c, from_logits=True)), [rng.normal(size=(n, k))]
        return (lambda g, a: enet_loss(ad.softmax(a, axis=1), c)), [rng.normal(size=(n, k))]

    return case


OP_CASES = {
    "matmul": _matmul,
    "add": _binary(ad.add),
    "mul": _binary(ad.mul),
    "sub": _binary(ad.sub),
    "scale": _scale,
    "sum": _reduce(ad.sum_),
    "mean": _reduce(ad.mean),
    "exp": _unary(ad.exp, _normal),
    "log": _unary(ad.log, lambda r, s: r.uniform(0.2, 3.0, size=s)),
    "sigmoid": _unary(ad.sigmoid, lambda r, s: r.normal(scale=2.0, size=s)),
    "logit": _unary(ad.logit, lambda r, s: r.uniform(0.05, 0.95, size=s)),
    "tanh": _unary(ad.tanh, _normal),
    "leaky_relu": _unary(lambda a: ad.leaky_relu(a, 0.2), lambda r, s: _away_from(r, s, (0.0,))),
    "softmax": _softmax_like(ad.softmax),
    "log_softmax": _softmax_like(ad.log_softmax),
    "clamp": _clamp,
    "concat": _concat,
    "slice": _slice,
    "reshape": _reshape,
}

LOSS_CASES = {
    "generator_loss": _gen_loss,
    "discriminator_loss_all": _disc_loss("all"),
    "discriminator_loss_own": _disc_loss("own"),
    "enet_loss_probs": _enet_loss(False),
    "enet_loss_logits": _enet_loss(True),
    "three_layer_mlp": _mlp,
}


def check_case(case, seed):
    """Worst relative error between backward() and finite differences on one instance."""
    rng = np.random.default_rng(seed)
    build, inputs = case(rng)
    probe = np.random.default_rng(seed + 10_000)

    g = ad.Graph()
    tensors = [g.variable(x) for x in inputs]
    out = build(g, *tensors)
    proj = probe.normal(size=out.shape)
    loss = ad.sum_(out * proj)
    grads = ad.backward(g, loss)

    worst = 0.0
    for i, x in enumerate(inputs):

        def f(xi, i=i):
            args = [ad.Tensor(v) for v in inputs]
            args[i] = ad.Tensor(xi)
            return float(np.sum(build(None, *args).value * proj))

        worst = max(worst, rel_error(grads[tensors[i].node], numeric_grad(f, x)))
    return worst


def _check_params(params, loss):
    g = ad.Graph()
    grads = gather_grads(g, ad.backward(g, loss(g)), params)
    worst = 0.0
    for p, gp in zip(params, grads):

        def f(v, p=p):
            saved = p.copy()
            p[...] = v
            try:
                return float(loss(None).value)
            finally:
                p[...] = saved

        worst = max(worst, rel_error(gp, numeric_grad(f, p)))
    return worst


def check_generator_network(seed):
    """Generator parameters through a frozen discriminator into the generator loss."""
    rng = np.random.default_rng(seed)
    gen = Generator(3, 2, 2, (5,), rng=rng)
    disc = Discriminator(2, 2, (4,), rng=rng)
    z = rng.uniform(-1, 1, size=(4, 3))
    c = rng.integers(2, size=4)

    def loss(graph):
        out = gen.forward(z, c, graph=graph)
        return generator_loss(disc.logits(out, frozen=True)[np.arange(4), c])

    return _check_params(gen.params(), loss)


def check_discriminator_network(seed):
    """Discriminator parameters through the weighted discriminator loss, extra unit included."""
    rng = np.random.default_rng(seed)
    disc = Discriminator(2, 3, (5, 4), rng=rng)
    real, fake = rng.uniform(-1, 1, size=(5, 2)), rng.uniform(-1, 1, size=(4, 2))
    w = rng.dirichlet(np.ones(3), size=5)
    c = rng.integers(3, size=4)

    def loss(graph):
        a = disc.logits(np.concatenate([real, fake]), graph=graph)
        return discriminator_loss(a[:5, :3], w, a[5:, :3], c, real_extra=a[:5, 3], fake_extra=a[5:, 3])

    return _check_params(disc.params(), loss)


def check_enet_network(seed):
    """E-net parameters (with bottleneck) through the cross-entropy loss."""
    rng = np.random.default_rng(seed)
    enet = ENet(3, 3, (6,), bottleneck=2, rng=rng)
    x = rng.uniform(-1, 1, size=(5, 3))
    c = rng.integers(3, size=5)
    return _check_params(enet.params(), lambda graph: enet_loss(enet.logits(x, graph=graph), c, from_logits=True))


NETWORK_CHECKS = {
    "generator_network": check_generator_network,
    "discriminator_network": check_discriminator_network,
    "enet_network": check_enet_network,
}
