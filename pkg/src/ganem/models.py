"""Conditional generator, (K+1)-head discriminator and E-net, all as MLPs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import DenseLayer, mlp_forward


def one_hot(c, k: int) -> np.ndarray:
    c = np.asarray(c, dtype=np.int64)
    if np.any((c < 0) | (c >= k)):
        raise ValueError(f"class index out of range [0, {k})")
    out = np.zeros(c.shape + (k,))
    np.put_along_axis(out, c[..., None], 1.0, axis=-1)
    return out


def _stack(sizes, hidden_act, out_act, rng):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = out_act if i == len(sizes) - 2 else hidden_act
        layers.append(DenseLayer.create(a, b, act, rng))
    return layers


def _batch(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise ad.ShapeError(what, x.shape, (dim,))
    return x, single


class Generator:
    """G(z, c): the MLP sees ``[z ; onehot(c)]``."""

    def __init__(self, noise_dim, n_classes, data_dim, hidden=(64, 64), out_activation="tanh", rng=None):
        self.noise_dim = int(noise_dim)
        self.n_classes = int(n_classes)
        self.data_dim = int(data_dim)
        self.out_activation = out_activation
        sizes = [self.noise_dim + self.n_classes, *hidden, self.data_dim]
        self.layers = _stack(sizes, "leaky_relu", out_activation, rng)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, z, c, graph=None, frozen=False) -> ad.Tensor:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.noise_dim:
            raise ad.ShapeError("generate", z.shape, (self.noise_dim,))
        u = one_hot(np.atleast_1d(c), self.n_classes)
        if len(u) != len(z):
            raise ad.ShapeError("generate", z.shape, u.shape)
        return mlp_forward(self.layers, np.concatenate([z, u], axis=1), graph=graph, frozen=frozen)

    def generate(self, z, c) -> np.ndarray:
        single = np.ndim(z) == 1
        out = self.forward(z, c).value
        return out[0] if single else out


@dataclass
class DiscriminatorOutput:
    class_probs: np.ndarray  # (N, K)
    extra_prob: np.ndarray  # (N,)
    class_logits: np.ndarray
    extra_logit: np.ndarray


class Discriminator:
    """Shared trunk plus a linear head of K class units and one real/fake unit.

    Every unit has its own sigmoid; outputs are not normalised jointly.
    """

    def __init__(self, data_dim, n_classes, hidden=(64, 64), rng=None):
        self.data_dim = int(data_dim)
        self.n_classes = int(n_classes)
        sizes = [self.data_dim, *hidden]
        self.trunk = _stack(sizes, "leaky_relu", "leaky_relu", rng)
        self.head = DenseLayer.create(sizes[-1], self.n_classes + 1, None, rng)

    @property
    def layers(self):
        return [*self.trunk, self.head]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def logits(self, x, graph=None, frozen=False) -> ad.Tensor:
        """(N, K+1) pre-sigmoid activations; the last column is the extra unit."""
        if isinstance(x, ad.Tensor):
            if x.shape[-1] != self.data_dim:
                raise ad.ShapeError("discriminate", x.shape, (self.data_dim,))
        else:
            x, _ = _batch(x, self.data_dim, "discriminate")
        return mlp_forward(self.layers, x, graph=graph, frozen=frozen)

    def discriminate(self, x) -> DiscriminatorOutput:
        x, single = _batch(x, self.data_dim, "discriminate")
        a = self.logits(x).value
        p = ad.sigmoid(a).value
        out = DiscriminatorOutput(p[:, :-1], p[:, -1], a[:, :-1], a[:, -1])
        if single:
            out = DiscriminatorOutput(
                out.class_probs[0], out.extra_prob[0], out.class_logits[0], out.extra_logit[0]
            )
        return out


class ENet:
    """Inverse-generator classifier with an optional bottleneck before its softmax head."""

    def __init__(self, data_dim, n_classes, hidden=(64, 64), bottleneck=None, rng=None):
        self.data_dim = int(data_dim)
        self.n_classes = int(n_classes)
        self.bottleneck_dim = None if bottleneck is None else int(bottleneck)
        sizes = [self.data_dim, *hidden]
        self.trunk = _stack(sizes, "leaky_relu", "leaky_relu", rng)
        if self.bottleneck_dim is not None:
            self.bottleneck = [DenseLayer.create(sizes[-1], self.bottleneck_dim, "leaky_relu", rng)]
            last = self.bottleneck_dim
        else:
            self.bottleneck = []
            last = sizes[-1]
        self.head = DenseLayer.create(last, self.n_classes, None, rng)

    @property
    def layers(self):
        return [*self.trunk, *self.bottleneck, self.head]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def logits(self, x, graph=None, frozen=False) -> ad.Tensor:
        if isinstance(x, ad.Tensor):
            if x.shape[-1] != self.data_dim:
                raise ad.ShapeError("e_predict", x.shape, (self.data_dim,))
        else:
            x, _ = _batch(x, self.data_dim, "e_predict")
        return mlp_forward(self.layers, x, graph=graph, frozen=frozen)

    def predict(self, x) -> np.ndarray:
        x, single = _batch(x, self.data_dim, "e_predict")
        p = ad.softmax(self.logits(x), axis=-1).value
        return p[0] if single else p

    def embed(self, x) -> np.ndarray:
        if self.bottleneck_dim is None:
            raise ValueError("E-net has no bottleneck layer configured")
        x, single = _batch(x, self.data_dim, "e_embed")
        h = mlp_forward([*self.trunk, *self.bottleneck], x).value
        return h[0] if single else h


def generate(gen: Generator, z, c):
    return gen.generate(z, c)


def discriminate(disc: Discriminator, x) -> DiscriminatorOutput:
    return disc.discriminate(x)


def e_predict(enet: ENet, x) -> np.ndarray:
    return enet.predict(x)


def e_embed(enet: ENet, x) -> np.ndarray:
    return enet.embed(x)
