"""Dense layers, RMSprop, weight clipping and binary parameter checkpoints."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import autodiff as ad

ACTIVATIONS = ("leaky_relu", "tanh", "sigmoid", "softmax", None)
LEAK = 0.2


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str | None = None

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def create(cls, n_in, n_out, activation=None, rng=None):
        # Random biases spread the first-layer kinks over the input range;
        # with zero biases a 2-D net starts positively homogeneous and is slow
        # to learn any radius-dependent function.
        w = ad.init_params((n_out, n_in), "scaled-normal", rng, fan_in=n_in)
        bound = 1.0 / np.sqrt(n_in)
        b = ad.init_params((n_out,), "uniform", rng, a=-bound, b=bound)
        return cls(w, b, activation)

    def params(self):
        return [self.weight, self.bias]


def _activate(x, kind):
    if kind is None:
        return x
    if kind == "leaky_relu":
        return ad.leaky_relu(x, LEAK)
    if kind == "tanh":
        return ad.tanh(x)
    if kind == "sigmoid":
        return ad.sigmoid(x)
    return ad.softmax(x, axis=-1)


def mlp_forward(layers, x, graph=None, frozen=False):
    """Run ``x`` (batch × features) through ``layers``.

    Parameters become leaves of ``graph`` (or of ``x``'s graph) unless
    ``frozen``, in which case they enter as constants and receive no gradient.
    """
    if not isinstance(x, ad.Tensor):
        x = ad.Tensor(x)
    if graph is None:
        graph = x.graph
    h = x
    for i, layer in enumerate(layers):
        if h.shape[-1] != layer.in_features:
            raise ad.ShapeError(f"mlp_forward layer {i}", h.shape, layer.weight.shape)
        if graph is None or frozen:
            w, b = ad.Tensor(layer.weight), ad.Tensor(layer.bias)
        else:
            w, b = graph.param(layer.weight), graph.param(layer.bias)
        h = _activate(ad.matmul(h, _transpose(w)) + b, layer.activation)
    return h


def _transpose(w):
    # W is stored (out, in); a constant transpose needs no graph node
    if w.graph is None:
        return ad.Tensor(w.value.T)
    shape = w.shape
    return w.graph.record("transpose", (w,), w.value.T, lambda g: (g.T.reshape(shape),))


def gather_grads(graph, gradmap, params):
    """Pick out gradients for parameter buffers registered on ``graph``."""
    out = []
    for p in params:
        t = graph._params.get(id(p))
        out.append(np.zeros_like(p) if t is None else gradmap[t.node])
    return out


# ------------------------------------------------------------------ RMSprop


@dataclass
class RmspropState:
    lr: float = 2e-4
    decay: float = 0.98
    eps: float = 1e-8
    lr_decay: float = 1.0  # per-epoch multiplicative schedule; 1.0 = off
    accumulators: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0 or not 0.0 < self.decay < 1.0 or self.eps <= 0:
            raise ValueError("RMSprop needs lr > 0, 0 < decay < 1, eps > 0")

    def end_epoch(self):
        self.lr *= self.lr_decay


def rmsprop_step(params, grads, state: RmspropState):
    """In-place RMSprop update; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    if not state.accumulators:
        state.accumulators = [np.zeros_like(p) for p in params]
    if len(state.accumulators) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    for i, (p, g, acc) in enumerate(zip(params, grads, state.accumulators)):
        if p.shape != np.shape(g) or p.shape != acc.shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape}, {np.shape(g)}, {acc.shape}")
        _kernels.rmsprop_update(p, g, acc, state.lr, state.decay, state.eps)
    return params, state


def clip_weights(params, c: float):
    """Project every entry of ``params`` into [-c, c] in place."""
    if not c > 0:
        raise ValueError(f"clip constant must be positive, got {c}")
    for p in params:
        _kernels.clip_inplace(p, c)
    return params


# ------------------------------------------------------------------ checkpoints

MAGIC = b"GEMC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(tensors: dict, meta: dict | None = None) -> bytes:
    """Serialise named float64 arrays.

    Layout (little endian): ``GEMC``, u32 version, u32 count, then per tensor
    u16 name length, name, u32 ndim, u32 dims; then u32 metadata length and
    UTF-8 JSON metadata; then the raw f64 payloads in manifest order.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    arrays = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        arrays.append(arr)
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for arr in arrays:
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def load_params(data: bytes, expected_shapes: dict | None = None):
    """Inverse of :func:`save_params`; returns ``(tensors, meta)``."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos} (wanted {n} more)")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic; not a GEMC checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = []
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        manifest.append((name, shape))
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(mlen)).decode())
    tensors = {}
    for name, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = arr
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after payload")
    if expected_shapes is not None:
        got = {k: v.shape for k, v in tensors.items()}
        want = {k: tuple(v) for k, v in expected_shapes.items()}
        if got != want:
            raise CheckpointError(f"shape manifest mismatch: expected {want}, found {got}")
    return tensors, meta
