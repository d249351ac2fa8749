"""GAN-based EM: weighted-discriminator M-step, E-net E-step, and the outer loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .metrics import classification_error, clustering_error, hard_labels
from .models import Discriminator, ENet, Generator
from .nn import CheckpointError, RmspropState, clip_weights, gather_grads, load_params, rmsprop_step, save_params

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOGIT_CAP = 30.0


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ validation


def check_soft_assignment(w, tol=1e-9) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] == 0:
        raise ValueError(f"soft assignment must be a non-empty N×K matrix, got shape {w.shape}")
    if np.any(w < -tol) or np.any(w > 1 + tol):
        raise ValueError("soft assignment entries must lie in [0, 1]")
    dev = np.max(np.abs(w.sum(axis=1) - 1.0))
    if dev > tol:
        raise ValueError(f"soft assignment rows must sum to 1 (max deviation {dev:.3g})")
    return w


def uniform_assignment(n, k) -> np.ndarray:
    return np.full((n, k), 1.0 / k)


# ------------------------------------------------------------------ losses


def generator_loss(class_logits: ad.Tensor) -> ad.Tensor:
    """-(1/2)·mean exp(a) over pre-sigmoid class-c logits a of a fake batch.

    exp(logit(sigmoid(a))) is just exp(a), so the logits are used directly;
    they are capped at ``LOGIT_CAP`` to keep exp finite.
    """
    if class_logits.size == 0:
        raise ValueError("generator_loss on an empty batch")
    capped = ad.clamp(class_logits, -np.inf, LOGIT_CAP)
    return ad.scale(ad.mean(ad.exp(capped)), -0.5)


def _clamped_prob(logits):
    return ad.clamp(ad.sigmoid(logits), PROB_FLOOR, 1.0 - PROB_FLOOR)


def discriminator_loss(
    real_logits: ad.Tensor,
    w,
    fake_logits: ad.Tensor,
    fake_classes=None,
    *,
    fake_term: str = "all",
    real_extra: ad.Tensor | None = None,
    fake_extra: ad.Tensor | None = None,
    extra_weight: float = 1.0,
) -> ad.Tensor:
    """Negated weighted log-likelihood of the K class heads, to be minimised.

    real part: mean_x sum_i w_i log D_i(x)
    fake part (``"all"``): mean over fakes of sum_i log(1 - D_i(G(z, c)))
    fake part (``"own"``): K · mean over fakes of log(1 - D_c(G(z, c))), each
    head seeing only fakes of its own class.
    The optional extra unit adds plain real/fake cross entropy times ``extra_weight``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape != real_logits.shape:
        raise ad.ShapeError("discriminator_loss", real_logits.shape, w.shape)
    if fake_logits.ndim != 2 or fake_logits.shape[1] != w.shape[1]:
        raise ad.ShapeError("discriminator_loss", fake_logits.shape, w.shape)
    if w.shape[0] == 0 or fake_logits.shape[0] == 0:
        raise ValueError("discriminator_loss on an empty batch")
    check_soft_assignment(w, tol=1e-6)

    real = ad.mean(ad.sum_(w * ad.log(_clamped_prob(real_logits)), axis=1))
    log_fake = ad.log(1.0 - _clamped_prob(fake_logits))
    if fake_term == "all":
        fake = ad.mean(ad.sum_(log_fake, axis=1))
    elif fake_term == "own":
        c = np.asarray(fake_classes, dtype=np.int64)
        if c.shape != (fake_logits.shape[0],):
            raise ad.ShapeError("discriminator_loss", fake_logits.shape, c.shape)
        fake = ad.scale(ad.mean(log_fake[np.arange(len(c)), c]), w.shape[1])
    else:
        raise ValueError(f"unknown fake_term {fake_term!r}")
    loss = ad.scale(real + fake, -1.0)
    if extra_weight and real_extra is not None and fake_extra is not None:
        bce = ad.mean(ad.log(_clamped_prob(real_extra))) + ad.mean(ad.log(1.0 - _clamped_prob(fake_extra)))
        loss = loss + ad.scale(bce, -float(extra_weight))
    return loss


def enet_loss(outputs: ad.Tensor, classes, from_logits: bool = False) -> ad.Tensor:
    """Mean cross entropy between E-net outputs and one-hot(classes)."""
    c = np.asarray(classes, dtype=np.int64)
    if outputs.shape[0] == 0 or c.size == 0:
        raise ValueError("enet_loss on an empty batch")
    if c.shape != (outputs.shape[0],):
        raise ad.ShapeError("enet_loss", outputs.shape, c.shape)
    if from_logits:
        logp = ad.log_softmax(outputs, axis=1)
    else:
        logp = ad.log(ad.clamp(outputs, PROB_FLOOR, 1.0))
    return ad.scale(ad.mean(logp[np.arange(len(c)), c]), -1.0)


def update_prior(w, sample_weights=None) -> np.ndarray:
    """phi_i = N_i / N with soft counts N_i = sum_n w[n, i]."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] == 0:
        raise ValueError("update_prior needs at least one sample")
    if sample_weights is None:
        counts = w.sum(axis=0)
    else:
        counts = np.asarray(sample_weights, dtype=np.float64) @ w
    return counts / counts.sum()


# ------------------------------------------------------------------ config & state


@dataclass
class EmConfig:
    n_clusters: int = 2
    n_iterations: int = 30
    m_epochs: int = 5
    e_steps: int | None = None  # None: scaled from data size, see resolve_e_steps
    m_batch: int = 64
    e_batch: int = 256
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_e: float = 2e-4
    rms_decay: float = 0.98
    rms_eps: float = 1e-8
    lr_decay: float = 1.0
    clip: float = 0.01
    clip_discriminator: bool = False
    clip_d: float = 0.05
    extra_unit_weight: float = 1.0
    fake_term: str = "all"
    noise: str = "uniform"
    noise_dim: int = 16
    g_hidden: tuple = (64, 64)
    d_hidden: tuple = (64, 64)
    e_hidden: tuple = (64, 64)
    bottleneck: int | None = None
    out_activation: str = "tanh"
    class_input_init: str = "random"  # "zero": generator starts class-agnostic
    warm_start_enet: bool = True
    epsilon: float = 0.05
    semisup_max_steps: int = 1000
    semisup_batch: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("g_hidden", "d_hidden", "e_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))

    def validate(self):
        positive = ("n_clusters", "m_batch", "e_batch", "noise_dim", "semisup_batch")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_iterations", "m_epochs", "semisup_max_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.e_steps is not None and self.e_steps <= 0:
            raise ConfigError("e_steps must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.clip <= 0 or self.clip_d <= 0:
            raise ConfigError("clip constants must be positive")
        for name in ("lr_g", "lr_d", "lr_e", "rms_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.rms_decay < 1.0:
            raise ConfigError("rms_decay must lie in (0, 1)")
        if self.noise not in ("uniform", "gaussian"):
            raise ConfigError(f"unknown noise distribution {self.noise!r}")
        if self.fake_term not in ("all", "own"):
            raise ConfigError(f"unknown fake_term {self.fake_term!r}")
        if self.class_input_init not in ("random", "zero"):
            raise ConfigError(f"unknown class_input_init {self.class_input_init!r}")
        if self.out_activation not in ("tanh", "sigmoid", None):
            raise ConfigError(f"unsupported generator output {self.out_activation!r}")
        if self.bottleneck is not None and self.bottleneck <= 0:
            raise ConfigError("bottleneck must be positive")
        return self

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def resolve_e_steps(config: EmConfig, n: int) -> int:
    """E-net updates per E-step.

    At least one full pass over N generated samples, and at least the
    reference budget of 1000 updates scaled by N / 50000.
    """
    if config.e_steps is not None:
        return config.e_steps
    return max(math.ceil(n / config.e_batch), round(1000 * n / 50000))


class Streams:
    """Independent generators derived from one root seed by name."""

    NAMES = ("noise", "class_uniform", "class_prior", "init", "shuffle", "semisup")

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rngs = {}

    def __getitem__(self, name) -> np.random.Generator:
        rng = self._rngs.get(name)
        if rng is None:
            key = zlib.crc32(name.encode())
            rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(key,)))
            self._rngs[name] = rng
        return rng


@dataclass
class ThetaState:
    generator: Generator
    discriminator: Discriminator
    enet: ENet
    phi: np.ndarray
    opt_g: RmspropState
    opt_d: RmspropState
    opt_e: RmspropState

    def named_params(self) -> dict:
        out = {}
        for prefix, net in (("g", self.generator), ("d", self.discriminator), ("e", self.enet)):
            for i, layer in enumerate(net.layers):
                out[f"{prefix}.{i}.weight"] = layer.weight
                out[f"{prefix}.{i}.bias"] = layer.bias
        out["phi"] = self.phi
        return out


def _make_enet(data_dim, config, rng):
    return ENet(data_dim, config.n_clusters, config.e_hidden, config.bottleneck, rng=rng)


def init_state(data_dim: int, config: EmConfig, streams: Streams) -> ThetaState:
    rng = streams["init"]
    k = config.n_clusters
    gen = Generator(config.noise_dim, k, data_dim, config.g_hidden, config.out_activation, rng=rng)
    disc = Discriminator(data_dim, k, config.d_hidden, rng=rng)
    enet = _make_enet(data_dim, config, rng)
    if config.class_input_init == "zero":
        gen.layers[0].weight[:, config.noise_dim :] = 0.0
    clip_weights(gen.params(), config.clip)
    if config.clip_discriminator:
        clip_weights(disc.params(), config.clip_d)

    def opt(lr):
        return RmspropState(lr, config.rms_decay, config.rms_eps, config.lr_decay)

    return ThetaState(gen, disc, enet, np.full(k, 1.0 / k), opt(config.lr_g), opt(config.lr_d), opt(config.lr_e))


def sample_noise(config: EmConfig, rng, n) -> np.ndarray:
    if config.noise == "uniform":
        return rng.uniform(-1.0, 1.0, size=(n, config.noise_dim))
    return rng.standard_normal((n, config.noise_dim))


def sample_prior_classes(phi, n, rng) -> np.ndarray:
    return rng.choice(len(phi), size=n, p=phi)


# ------------------------------------------------------------------ steps


def generator_step(state: ThetaState, config: EmConfig, streams: Streams, batch: int) -> float:
    k = config.n_clusters
    c = streams["class_uniform"].integers(k, size=batch)
    z = sample_noise(config, streams["noise"], batch)
    g = ad.Graph()
    fake = state.generator.forward(z, c, graph=g)
    logits = state.discriminator.logits(fake, frozen=True)
    loss = generator_loss(logits[np.arange(batch), c])
    grads = gather_grads(g, ad.backward(g, loss), state.generator.params())
    rmsprop_step(state.generator.params(), grads, state.opt_g)
    clip_weights(state.generator.params(), config.clip)
    return float(loss.value)


def discriminator_step(state: ThetaState, config: EmConfig, streams: Streams, x_real, w_real) -> float:
    k = config.n_clusters
    b = len(x_real)
    c = streams["class_uniform"].integers(k, size=b)
    z = sample_noise(config, streams["noise"], b)
    x_fake = state.generator.forward(z, c).value
    g = ad.Graph()
    logits = state.discriminator.logits(np.concatenate([x_real, x_fake]), graph=g)
    real, fake = logits[:b], logits[b:]
    loss = discriminator_loss(
        real[:, :k],
        w_real,
        fake[:, :k],
        c,
        fake_term=config.fake_term,
        real_extra=real[:, k],
        fake_extra=fake[:, k],
        extra_weight=config.extra_unit_weight,
    )
    grads = gather_grads(g, ad.backward(g, loss), state.discriminator.params())
    rmsprop_step(state.discriminator.params(), grads, state.opt_d)
    if config.clip_discriminator:
        clip_weights(state.discriminator.params(), config.clip_d)
    return float(loss.value)


def m_step(state: ThetaState, data, w, config: EmConfig, streams: Streams) -> dict:
    """Update phi in closed form, then run alternating G/D minibatch epochs."""
    data = np.asarray(data, dtype=np.float64)
    w = check_soft_assignment(w)
    if len(w) != len(data):
        raise ValueError(f"{len(w)} assignment rows for {len(data)} samples")
    state.phi = update_prior(w)
    lg, ld = [], []
    n = len(data)
    for _ in range(config.m_epochs):
        order = streams["shuffle"].permutation(n)
        for start in range(0, n, config.m_batch):
            idx = order[start : start + config.m_batch]
            lg.append(generator_step(state, config, streams, len(idx)))
            ld.append(discriminator_step(state, config, streams, data[idx], w[idx]))
        state.opt_g.end_epoch()
        state.opt_d.end_epoch()
    return {
        "loss_g": float(np.mean(lg)) if lg else math.nan,
        "loss_d": float(np.mean(ld)) if ld else math.nan,
    }


def _enet_update(state: ThetaState, x, classes) -> float:
    g = ad.Graph()
    logits = state.enet.logits(x, graph=g)
    loss = enet_loss(logits, classes, from_logits=True)
    grads = gather_grads(g, ad.backward(g, loss), state.enet.params())
    rmsprop_step(state.enet.params(), grads, state.opt_e)
    return float(loss.value)


def supervised_finetune(state: ThetaState, x_lab, y_lab, config: EmConfig, streams: Streams) -> dict:
    """Train E on labelled reals until its labelled error is at most epsilon.

    The error is measured before every update, so training never continues
    past the first point where the threshold is met.
    """
    steps = 0
    errors = []
    while True:
        err = classification_error(hard_labels(state.enet.predict(x_lab)), y_lab)
        errors.append(err)
        if err <= config.epsilon:
            stopped = "epsilon"
            break
        if steps >= config.semisup_max_steps:
            stopped = "max_steps"
            log.warning("labelled fine-tuning hit the step cap with error %.3f", err)
            break
        if len(x_lab) > config.semisup_batch:
            idx = streams["semisup"].choice(len(x_lab), config.semisup_batch, replace=False)
        else:
            idx = np.arange(len(x_lab))
        _enet_update(state, x_lab[idx], y_lab[idx])
        steps += 1
    return {"steps": steps, "labeled_error": errors[-1], "stopped": stopped, "errors": errors}


def e_step(state: ThetaState, data, config: EmConfig, streams: Streams, labeled=None):
    """Fit E on (G(z, c), c) with c ~ phi, optionally fine-tune on labelled reals,
    and return the new soft assignment of every real sample."""
    data = np.asarray(data, dtype=np.float64)
    if not config.warm_start_enet:
        state.enet = _make_enet(data.shape[1], config, streams["init"])
        state.opt_e = RmspropState(config.lr_e, config.rms_decay, config.rms_eps, config.lr_decay)
    losses = []
    for _ in range(resolve_e_steps(config, len(data))):
        c = sample_prior_classes(state.phi, config.e_batch, streams["class_prior"])
        z = sample_noise(config, streams["noise"], config.e_batch)
        x_fake = state.generator.forward(z, c).value
        losses.append(_enet_update(state, x_fake, c))
    state.opt_e.end_epoch()
    info = {"loss_e": float(np.mean(losses)) if losses else math.nan}
    if labeled is not None:
        idx, y = labeled
        info["semisup"] = supervised_finetune(state, data[idx], np.asarray(y), config, streams)
    w = state.enet.predict(data)
    check_soft_assignment(w)
    return w, info


# ------------------------------------------------------------------ driver


@dataclass
class RunResult:
    state: ThetaState
    w: np.ndarray
    trace: list = field(default_factory=list)
    semisup: list = field(default_factory=list)


def run_gan_em(data, config: EmConfig, labeled=None, truth=None, callback=None) -> RunResult:
    """Alternate M- and E-steps ``n_iterations`` times from a uniform assignment.

    ``labeled`` is an optional ``(indices, labels)`` pair enabling the
    semi-supervised E-step; ``truth`` enables the per-iteration clustering
    error column.  ``callback(row, state)`` is invoked after every iteration.
    """
    config.validate()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("data must be a non-empty N×d matrix")
    if labeled is not None:
        idx, y = labeled
        idx = np.asarray(idx, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        if idx.shape != y.shape or (idx.size and (idx.min() < 0 or idx.max() >= len(data))):
            raise ValueError("labelled indices must be valid sample indices with one label each")
        if y.size and (y.min() < 0 or y.max() >= config.n_clusters):
            raise ValueError("labels out of range")
        labeled = (idx, y)
    streams = Streams(config.seed)
    state = init_state(data.shape[1], config, streams)
    k = config.n_clusters
    w = uniform_assignment(len(data), k)
    result = RunResult(state, w)
    for it in range(1, config.n_iterations + 1):
        m_info = m_step(state, data, w, config, streams)
        w, e_info = e_step(state, data, config, streams, labeled)
        row = {"iteration": it, "L_G": m_info["loss_g"], "L_D": m_info["loss_d"], "L_E": e_info["loss_e"]}
        for i, p in enumerate(state.phi):
            row[f"phi_{i}"] = float(p)
        pred = hard_labels(w)
        row["clustering_error"] = clustering_error(pred, truth, k).error if truth is not None else math.nan
        if labeled is not None:
            row["labeled_error"] = e_info["semisup"]["labeled_error"]
            result.semisup.append(e_info["semisup"])
        else:
            row["labeled_error"] = math.nan
        result.trace.append(row)
        log.info("iteration %d: %s", it, {k_: round(v, 4) if isinstance(v, float) else v for k_, v in row.items()})
        if callback is not None:
            callback(row, state)
    result.w = w
    return result


def metrics_csv(trace) -> str:
    """CSV text of a metrics trace; floats use repr so reruns compare byte for byte."""
    if not trace:
        return ""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = list(trace[0])
    writer.writerow(header)
    for row in trace:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in (row[h] for h in header)])
    return out.getvalue()


# ------------------------------------------------------------------ checkpoints


def save_state(state: ThetaState, config: EmConfig, data_dim: int, extra: dict | None = None) -> bytes:
    """Serialise all network parameters and phi; the config rides in the metadata."""
    meta = {"kind": "gan-em-state", "config": config.to_dict(), "data_dim": int(data_dim)}
    if extra:
        meta.update(extra)
    return save_params(state.named_params(), meta)


def load_state(blob: bytes) -> tuple[ThetaState, EmConfig, dict]:
    """Rebuild a state saved by :func:`save_state`; shapes are checked against the config."""
    _, meta = load_params(blob)
    if meta.get("kind") != "gan-em-state":
        raise CheckpointError("not a GAN-EM state checkpoint")
    config = EmConfig(**meta["config"]).validate()
    state = init_state(int(meta["data_dim"]), config, Streams(config.seed))
    target = state.named_params()
    tensors, _ = load_params(blob, {name: arr.shape for name, arr in target.items()})
    for name, arr in target.items():
        arr[...] = tensors[name]
    return state, config, meta
